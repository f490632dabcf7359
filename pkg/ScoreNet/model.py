"""Time-conditional score network and the noise-free U-Net baseline.

The same encoder-decoder backbone serves three roles:

* unconditional score model ``s(x_t, t)`` (``conditional=False``),
* conditional score model ``s(x_t, y, t)`` with the condition concatenated as a
  second input channel (``conditional=True``),
* U-Net baseline mapping a condition straight to a radiograph
  (``noise_conditioned=False``).

Flat parameter layout: the concatenation of ``named_parameters()`` in
registration order, each tensor flattened row-major; see
:meth:`ScoreModel.parameter_layout`.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from SDE.ve_sde import ShapeMismatchError, SigmaSchedule, TimeLike, sigma_at
from ScoreNet.layers import GaussianFourierProjection, ResidualBlock, downsample, make_norm, upsample

logger = logging.getLogger(__name__)


class ModelConfigError(ValueError):
    """Raised for inconsistent model configurations or conditionality misuse."""


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ScoreModelConfig:
    """Architecture and conditioning options of :class:`ScoreModel`."""

    resolution_levels: List[int] = field(default_factory=lambda: [64, 32, 16])
    channels_per_level: List[int] = field(default_factory=lambda: [32, 64, 64])
    fourier_dim: int = 64
    fourier_scale: float = 16.0
    conditional: bool = False
    noise_conditioned: bool = True
    input_channels: int = 1
    num_res_blocks: int = 1
    normalization: str = "group"
    input_scaling: bool = True
    sigma_data: float = 0.5
    sigma_min: float = 0.01
    sigma_max: float = 128.0
    init_seed: int = 0

    def __post_init__(self) -> None:
        self.resolution_levels = [int(r) for r in self.resolution_levels]
        self.channels_per_level = [int(c) for c in self.channels_per_level]

    @classmethod
    def for_method(cls, method: str, **overrides: Any) -> "ScoreModelConfig":
        """Config wiring for ``csm`` (unconditional), ``ctm`` (conditional) or ``unet``."""
        wiring = {
            "csm": dict(conditional=False, noise_conditioned=True, input_channels=1),
            "ctm": dict(conditional=True, noise_conditioned=True, input_channels=2),
            "unet": dict(conditional=True, noise_conditioned=False, input_channels=1),
        }
        if method not in wiring:
            raise ModelConfigError(f"Unknown method '{method}', expected one of {sorted(wiring)}")
        merged = {**overrides, **wiring[method]}
        config = cls(**merged)
        config.validate()
        return config

    @property
    def method(self) -> str:
        if not self.noise_conditioned:
            return "unet"
        return "ctm" if self.conditional else "csm"

    @property
    def image_size(self) -> int:
        return self.resolution_levels[0]

    @property
    def schedule(self) -> SigmaSchedule:
        return SigmaSchedule(self.sigma_min, self.sigma_max)

    def validate(self) -> None:
        levels, channels = self.resolution_levels, self.channels_per_level
        if len(levels) != len(channels) or len(levels) < 2:
            raise ModelConfigError(
                f"resolution_levels and channels_per_level need equal length >= 2, got {levels} / {channels}"
            )
        for size in levels:
            if not _is_power_of_two(size):
                raise ModelConfigError(f"Resolution {size} is not a power of two")
        for hi, lo in zip(levels, levels[1:]):
            if hi not in (lo, 2 * lo):
                raise ModelConfigError(f"Consecutive levels must halve or repeat, got {hi} -> {lo}")
        if min(channels) < 1 or self.fourier_dim < 1 or self.num_res_blocks < 1:
            raise ModelConfigError("Channel counts, fourier_dim and num_res_blocks must be positive")
        if self.normalization not in ("group", "none"):
            raise ModelConfigError(f"normalization must be 'group' or 'none', got '{self.normalization}'")
        if self.noise_conditioned:
            expected = 2 if self.conditional else 1
            if self.input_channels != expected:
                raise ModelConfigError(
                    f"{'Conditional' if self.conditional else 'Unconditional'} score models take "
                    f"{expected} input channel(s), got {self.input_channels}"
                )
        elif not self.conditional or self.input_channels != 1:
            raise ModelConfigError("The U-Net baseline is conditional with a single (condition) input channel")
        SigmaSchedule(self.sigma_min, self.sigma_max)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _time_tensor(t: TimeLike, batch: int, like: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.to(dtype=like.dtype, device=like.device).reshape(-1)
        if t.numel() == 1:
            return t.expand(batch).clone()
        if t.numel() != batch:
            raise ShapeMismatchError(f"Got {t.numel()} time points for a batch of {batch}")
        return t
    return torch.full((batch,), float(t), dtype=like.dtype, device=like.device)


class ScoreModel(nn.Module):
    """Encoder-decoder with skip connections across ``resolution_levels``."""

    def __init__(self, config: ScoreModelConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config
        levels, channels = config.resolution_levels, config.channels_per_level

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(config.init_seed))
            generator = torch.Generator().manual_seed(int(config.init_seed))

            temb_dim: Optional[int] = None
            if config.noise_conditioned:
                temb_dim = 4 * channels[0]
                self.fourier = GaussianFourierProjection(config.fourier_dim, config.fourier_scale, generator)
                self.temb = nn.Sequential(
                    nn.Linear(2 * config.fourier_dim, temb_dim),
                    nn.SiLU(),
                    nn.Linear(temb_dim, temb_dim),
                )
            self.temb_dim = temb_dim

            self.conv_in = nn.Conv2d(config.input_channels, channels[0], 3, padding=1)

            self.down_blocks = nn.ModuleList()
            current = channels[0]
            for level, width in enumerate(channels):
                blocks = nn.ModuleList()
                for _ in range(config.num_res_blocks):
                    blocks.append(ResidualBlock(current, width, temb_dim, config.normalization))
                    current = width
                self.down_blocks.append(blocks)

            self.mid = ResidualBlock(current, current, temb_dim, config.normalization)

            self.up_blocks = nn.ModuleList()
            for level in reversed(range(len(levels))):
                width = channels[level]
                self.up_blocks.append(ResidualBlock(current + width, width, temb_dim, config.normalization))
                current = width

            self.norm_out = make_norm(current, config.normalization)
            self.conv_out = nn.Conv2d(current, 1, 3, padding=1)
            # Zero-initialised head: the untrained score estimate is exactly 0.
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)

        self._factors = [1] + [hi // lo for hi, lo in zip(levels, levels[1:])]

    # Properties ---------------------------------------------------------
    @property
    def conditional(self) -> bool:
        return self.config.conditional

    @property
    def noise_conditioned(self) -> bool:
        return self.config.noise_conditioned

    @property
    def schedule(self) -> SigmaSchedule:
        return self.config.schedule

    @property
    def fourier_frequencies(self) -> torch.Tensor:
        if not self.noise_conditioned:
            raise ModelConfigError("The U-Net baseline has no noise embedding")
        return self.fourier.frequencies

    # Parameter layout ---------------------------------------------------
    def parameter_layout(self) -> List[Tuple[str, Tuple[int, ...], int]]:
        """(name, shape, offset) of every parameter inside the flat vector."""
        layout, offset = [], 0
        for name, param in self.named_parameters():
            layout.append((name, tuple(param.shape), offset))
            offset += param.numel()
        return layout

    def num_parameters(self) -> int:
        return sum(param.numel() for param in self.parameters())

    def flat_parameters(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach().clone()

    def load_flat_parameters(self, flat: torch.Tensor) -> None:
        if flat.numel() != self.num_parameters():
            raise ModelConfigError(f"Flat vector has {flat.numel()} entries, model needs {self.num_parameters()}")
        with torch.no_grad():
            nn.utils.vector_to_parameters(flat.to(next(self.parameters()).dtype), self.parameters())

    # Forward passes -----------------------------------------------------
    def fourier_embed(self, t: TimeLike) -> torch.Tensor:
        """Fourier features of ``u = ln sigma(t)``; shape ``(B, 2 * fourier_dim)``."""
        frequencies = self.fourier_frequencies
        t_tensor = torch.as_tensor(t, dtype=frequencies.dtype, device=frequencies.device).reshape(-1)
        sigma = sigma_at(self.schedule, t_tensor)
        return self.fourier(torch.log(sigma))

    def _check_input(self, x: torch.Tensor, name: str) -> None:
        size = self.config.image_size
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != size or x.shape[3] != size:
            raise ShapeMismatchError(f"{name} must have shape (B, 1, {size}, {size}), got {tuple(x.shape)}")

    def _backbone(self, h: torch.Tensor, temb: Optional[torch.Tensor]) -> torch.Tensor:
        h = self.conv_in(h)
        skips = []
        for factor, blocks in zip(self._factors, self.down_blocks):
            h = downsample(h, factor)
            for block in blocks:
                h = block(h, temb)
            skips.append(h)

        h = self.mid(h, temb)

        for factor, block in zip(reversed(self._factors), self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            h = upsample(h, factor)
        return self.conv_out(F.silu(self.norm_out(h)))

    def score_forward(
        self,
        xt: torch.Tensor,
        condition: Optional[torch.Tensor],
        t: TimeLike,
    ) -> torch.Tensor:
        """Estimated score at ``(x_t, [y], t)``, same shape as ``x_t``."""
        if not self.noise_conditioned:
            raise ModelConfigError("score_forward called on the U-Net baseline; use unet_forward")
        self._check_input(xt, "x_t")
        if self.conditional != (condition is not None):
            raise ModelConfigError(
                "Conditional models need a condition and unconditional models must not get one"
            )

        t_batch = _time_tensor(t, xt.shape[0], xt)
        sigma = sigma_at(self.schedule, t_batch)
        sigma4 = sigma[:, None, None, None]

        h = xt
        if self.config.input_scaling:
            h = h / torch.sqrt(sigma4 * sigma4 + self.config.sigma_data**2)
        if condition is not None:
            self._check_input(condition, "condition")
            h = torch.cat([h, condition.to(h.dtype)], dim=1)

        temb = self.temb(self.fourier(torch.log(sigma)))
        return self._backbone(h, temb) / sigma4

    def unet_forward(self, condition: torch.Tensor) -> torch.Tensor:
        """Single-pass prediction of a radiograph from a condition, clamped to [0, 1]."""
        if self.noise_conditioned:
            raise ModelConfigError("unet_forward requires a model built with noise_conditioned=False")
        self._check_input(condition, "condition")
        return torch.clamp(self._backbone(condition, None), 0.0, 1.0)

    def forward(
        self,
        x: torch.Tensor,
        condition: Optional[torch.Tensor] = None,
        t: Optional[TimeLike] = None,
    ) -> torch.Tensor:
        if not self.noise_conditioned:
            return self.unet_forward(x)
        if t is None:
            raise ModelConfigError("Score models need a time point")
        return self.score_forward(x, condition, t)


def build_model(config: ScoreModelConfig, dtype: torch.dtype = torch.float32) -> ScoreModel:
    model = ScoreModel(config).to(dtype)
    logger.info(
        "Built %s model: levels=%s channels=%s, %d parameters",
        config.method,
        config.resolution_levels,
        config.channels_per_level,
        model.num_parameters(),
    )
    return model


def parameter_count(config: ScoreModelConfig) -> int:
    """Parameter count of a model built from ``config``."""
    return ScoreModel(config).num_parameters()
