"""Noise schedule, perturbation kernel and prior of the variance-exploding SDE.

Images are ``torch.Tensor`` objects laid out as ``(batch, channels, height,
width)``; a single image may also be passed as ``(channels, height, width)``.
Time points are either Python floats or 1-D tensors holding one ``t`` per batch
element.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import torch

logger = logging.getLogger(__name__)

TimeLike = Union[float, torch.Tensor]


class ScheduleDomainError(ValueError):
    """Raised when a time point or schedule falls outside its admitted range."""


class ShapeMismatchError(ValueError):
    """Raised when two tensors that must share a shape do not."""


@dataclass(frozen=True)
class SigmaSchedule:
    """Geometric noise schedule ``sigma(t) = sigma_min * (sigma_max / sigma_min) ** t``."""

    sigma_min: float = 0.01
    sigma_max: float = 128.0

    def __post_init__(self) -> None:
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ScheduleDomainError(
                f"Schedule requires 0 < sigma_min < sigma_max, got "
                f"sigma_min={self.sigma_min}, sigma_max={self.sigma_max}"
            )

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def sigma(self, t: TimeLike) -> TimeLike:
        return sigma_at(self, t)


def _check_time(t: TimeLike, *, allow_zero: bool) -> None:
    if isinstance(t, torch.Tensor):
        lo = float(t.min()) if t.numel() else 0.5
        hi = float(t.max()) if t.numel() else 0.5
    else:
        lo = hi = float(t)
    if math.isnan(lo) or math.isnan(hi):
        raise ScheduleDomainError("Time point is NaN")
    if hi > 1.0 or lo < 0.0 or (not allow_zero and lo <= 0.0):
        bound = "[0, 1]" if allow_zero else "(0, 1]"
        raise ScheduleDomainError(f"Time point outside {bound}: min={lo}, max={hi}")


def _per_sample(value: TimeLike, like: torch.Tensor) -> TimeLike:
    """Reshape a per-batch tensor so it broadcasts over ``(B, C, H, W)``."""
    if isinstance(value, torch.Tensor) and value.dim() == 1 and like.dim() > 1:
        return value.to(like.dtype).view(-1, *([1] * (like.dim() - 1)))
    return value


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def sigma_at(schedule: SigmaSchedule, t: TimeLike) -> TimeLike:
    """Noise level at ``t``; ``t = 0`` is admitted for schedule queries.

    Written as ``sigma_min ** (1 - t) * sigma_max ** t`` so both endpoints are
    reproduced exactly.
    """
    _check_time(t, allow_zero=True)
    if isinstance(t, torch.Tensor):
        dtype = t.dtype if t.is_floating_point() else torch.get_default_dtype()
        t = t.to(dtype)
        lo = torch.tensor(schedule.sigma_min, dtype=dtype, device=t.device)
        hi = torch.tensor(schedule.sigma_max, dtype=dtype, device=t.device)
        return torch.pow(lo, 1.0 - t) * torch.pow(hi, t)
    return schedule.sigma_min ** (1.0 - t) * schedule.sigma_max**t


def drift_diffusion(schedule: SigmaSchedule, t: TimeLike) -> Tuple[TimeLike, TimeLike]:
    """Zero drift and ``g(t) = sigma(t) * sqrt(2 ln(sigma_max / sigma_min))``."""
    sigma = sigma_at(schedule, t)
    diffusion = sigma * math.sqrt(2.0 * schedule.log_ratio)
    drift = torch.zeros_like(sigma) if isinstance(sigma, torch.Tensor) else 0.0
    return drift, diffusion


def perturb(
    x0: torch.Tensor,
    schedule: SigmaSchedule,
    t: TimeLike,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Sample of the VE kernel ``x_t = x_0 + sigma(t) * noise``."""
    _check_same_shape(x0, noise, "perturb")
    sigma = _per_sample(sigma_at(schedule, t), x0)
    return x0 + sigma * noise


def kernel_score(
    xt: torch.Tensor,
    x0: torch.Tensor,
    schedule: SigmaSchedule,
    t: TimeLike,
) -> torch.Tensor:
    """Exact score of the Gaussian kernel: ``(x_0 - x_t) / sigma(t) ** 2``."""
    _check_same_shape(xt, x0, "kernel_score")
    _check_time(t, allow_zero=False)
    sigma = _per_sample(sigma_at(schedule, t), xt)
    return (x0 - xt) / (sigma * sigma)


def prior_sample(
    shape: Sequence[int],
    schedule: SigmaSchedule,
    generator: torch.Generator,
    *,
    dtype: torch.dtype | None = None,
    device: torch.device | str | None = None,
) -> torch.Tensor:
    """i.i.d. ``N(0, sigma_max ** 2)`` entries drawn from ``generator``."""
    if any(int(dim) <= 0 for dim in shape):
        raise ShapeMismatchError(f"Prior shape must be positive, got {tuple(shape)}")
    noise = torch.randn(tuple(shape), generator=generator, dtype=dtype, device=device)
    return noise * schedule.sigma_max


def uniform_time(
    batch_size: int,
    generator: torch.Generator,
    *,
    t_eps: float = 1e-5,
    dtype: torch.dtype | None = None,
    device: torch.device | str | None = None,
) -> torch.Tensor:
    """Training-time draws ``t ~ U[t_eps, 1]``."""
    if not 0.0 < t_eps < 1.0:
        raise ScheduleDomainError(f"t_eps must lie in (0, 1), got {t_eps}")
    u = torch.rand(batch_size, generator=generator, dtype=dtype, device=device)
    return t_eps + (1.0 - t_eps) * u
