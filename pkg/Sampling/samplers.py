"""Reverse-diffusion samplers: predictor, Langevin corrector, CSM, CTM and U-Net.

Both diffusion methods share one predictor-corrector loop over a decreasing time
grid ``t_n = (n / N) * t_end`` for ``n = N-1 .. 0``. CSM starts from the noised
condition at ``t_end = t0`` with an unconditional score; CTM starts from the
``N(0, sigma_max^2)`` prior at ``t_end = 1`` with the condition fed to the score at
every call.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Protocol, Tuple

import torch
from tqdm import tqdm

from SDE.ve_sde import SigmaSchedule, TimeLike, drift_diffusion, prior_sample, sigma_at

logger = logging.getLogger(__name__)

DISCRETIZATIONS = ("variance", "literal")


class SamplerMisuseError(ValueError):
    """Raised when a sampler is given the wrong kind of model or time ordering."""


class ScoreSource(Protocol):
    """Anything that evaluates ``s(x_t, [y], t)``; :class:`ScoreModel` qualifies."""

    conditional: bool
    noise_conditioned: bool

    def score_forward(self, xt: torch.Tensor, condition: Optional[torch.Tensor], t: TimeLike) -> torch.Tensor:
        ...


@dataclass
class GaussianScore:
    """Exact score of ``N(mean, std^2)`` data perturbed by the VE kernel."""

    schedule: SigmaSchedule
    mean: float = 0.0
    std: float = 1.0
    conditional: bool = False
    noise_conditioned: bool = True

    def score_forward(self, xt: torch.Tensor, condition: Optional[torch.Tensor], t: TimeLike) -> torch.Tensor:
        sigma = sigma_at(self.schedule, t)
        if isinstance(sigma, torch.Tensor) and sigma.dim() == 1 and xt.dim() > 1:
            sigma = sigma.view(-1, *([1] * (xt.dim() - 1)))
        return (self.mean - xt) / (self.std**2 + sigma * sigma)


@dataclass
class SamplerConfig:
    """Sampling hyperparameters."""

    n_steps: int = 500
    t0: float = 0.4
    snr: float = 0.4
    corrector_steps: int = 1
    clamp_output: bool = True
    seed: int = 0
    t_eps: float = 1e-5
    discretization: str = "variance"
    record_trace: bool = False
    show_progress: bool = False

    def validate(self) -> None:
        if self.n_steps < 1:
            raise SamplerMisuseError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0.0 < self.t0 <= 1.0:
            raise SamplerMisuseError(f"t0 must lie in (0, 1], got {self.t0}")
        if not self.snr > 0.0:
            raise SamplerMisuseError(f"snr must be positive, got {self.snr}")
        if self.corrector_steps < 0:
            raise SamplerMisuseError("corrector_steps must be >= 0")
        if self.discretization not in DISCRETIZATIONS:
            raise SamplerMisuseError(f"discretization must be one of {DISCRETIZATIONS}")


@dataclass
class StepRecord:
    n: int
    t: float
    sigma: float
    mean_abs_x: float
    corrector_epsilon: float
    corrector_skipped: bool = False


@dataclass
class SampleTrace:
    steps: List[StepRecord] = field(default_factory=list)

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["n\tt_n\tsigma\tcorrector_epsilon"]
        lines.extend(f"{s.n}\t{s.t:.9g}\t{s.sigma:.9g}\t{s.corrector_epsilon:.9g}" for s in self.steps)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


@dataclass
class SampleResult:
    image: torch.Tensor
    trace: Optional[SampleTrace] = None


def time_grid(n_steps: int, t_end: float = 1.0, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """``[t_0, ..., t_N]`` with ``t_n = (n / N) * t_end``."""
    return torch.arange(n_steps + 1, dtype=dtype) / n_steps * t_end


def _score(model: ScoreSource, x: torch.Tensor, condition: Optional[torch.Tensor], t: float) -> torch.Tensor:
    return model.score_forward(x, condition if model.conditional else None, t)


def predictor_step(
    model: ScoreSource,
    x: torch.Tensor,
    condition: Optional[torch.Tensor],
    t_hi: float,
    t_lo: float,
    schedule: SigmaSchedule,
    generator: Optional[torch.Generator],
    *,
    discretization: str = "variance",
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """One reverse-diffusion step from ``t_hi`` down to ``t_lo``.

    ``variance``: ``x + (s_hi^2 - s_lo^2) * s(x, t_hi) + sqrt(s_hi^2 - s_lo^2) * z``.
    ``literal``: ``x + g(t_lo)^2 * s(x, t_lo) + g(t_lo) * z`` with no step length.
    """
    if not 0.0 <= t_lo <= t_hi <= 1.0:
        raise SamplerMisuseError(f"Predictor needs 0 <= t_lo <= t_hi <= 1, got t_hi={t_hi}, t_lo={t_lo}")
    if noise is None:
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)

    if discretization == "literal":
        _, g = drift_diffusion(schedule, t_lo)
        return x + g * g * _score(model, x, condition, t_lo) + g * noise

    sigma_hi = sigma_at(schedule, t_hi)
    sigma_lo = sigma_at(schedule, t_lo)
    variance = sigma_hi * sigma_hi - sigma_lo * sigma_lo
    if variance <= 0.0:
        return x
    return x + variance * _score(model, x, condition, t_hi) + math.sqrt(variance) * noise


def _per_sample_norm(v: torch.Tensor) -> torch.Tensor:
    return v.flatten(1).norm(dim=1)


def corrector_step(
    model: ScoreSource,
    x: torch.Tensor,
    condition: Optional[torch.Tensor],
    t: float,
    snr: float,
    generator: Optional[torch.Generator],
    *,
    noise: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """One Langevin update ``x + eps * s + sqrt(2 eps) * z``.

    ``eps = 2 * (snr * ||z|| / ||s||)^2`` with L2 norms over each whole sample.
    Samples whose score norm is zero are left unchanged (``eps = 0``).
    Returns the new state and the per-sample step sizes.
    """
    if not 0.0 < t <= 1.0:
        raise SamplerMisuseError(f"Corrector time must lie in (0, 1], got {t}")
    score = _score(model, x, condition, t)
    if noise is None:
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)

    score_norm = _per_sample_norm(score)
    noise_norm = _per_sample_norm(noise)
    active = score_norm > 0.0
    safe_norm = torch.where(active, score_norm, torch.ones_like(score_norm))
    eps = torch.where(active, 2.0 * (snr * noise_norm / safe_norm) ** 2, torch.zeros_like(score_norm))

    shape = (-1,) + (1,) * (x.dim() - 1)
    step = eps.view(shape)
    return x + step * score + torch.sqrt(2.0 * step) * noise, eps


def _batched(y: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if y.dim() == 3:
        return y[None], True
    if y.dim() == 4:
        return y, False
    raise SamplerMisuseError(f"Condition must be (1, H, W) or (B, 1, H, W), got {tuple(y.shape)}")


def _run_chain(
    model: ScoreSource,
    x: torch.Tensor,
    condition: Optional[torch.Tensor],
    config: SamplerConfig,
    schedule: SigmaSchedule,
    t_end: float,
    generator: torch.Generator,
) -> Tuple[torch.Tensor, Optional[SampleTrace]]:
    grid = time_grid(config.n_steps, t_end).tolist()
    trace = SampleTrace() if config.record_trace else None
    steps = range(config.n_steps - 1, -1, -1)
    for n in tqdm(steps, desc="sampling", disable=not config.show_progress, leave=False):
        t_hi, t_lo = grid[n + 1], grid[n]
        x = predictor_step(
            model, x, condition, t_hi, t_lo, schedule, generator, discretization=config.discretization
        )
        eps_value, skipped = 0.0, t_lo < config.t_eps
        if not skipped:
            for _ in range(config.corrector_steps):
                x, eps = corrector_step(model, x, condition, t_lo, config.snr, generator)
                eps_value = float(eps.mean())
                if bool((eps == 0).any()):
                    skipped = True
                    logger.debug("Corrector skipped at n=%d: zero score norm", n)
        if trace is not None:
            trace.steps.append(
                StepRecord(
                    n=n,
                    t=t_lo,
                    sigma=float(sigma_at(schedule, t_lo)),
                    mean_abs_x=float(x.abs().mean()),
                    corrector_epsilon=eps_value,
                    corrector_skipped=skipped,
                )
            )
    return x, trace


def csm_initial_state(
    y: torch.Tensor,
    t0: float,
    schedule: SigmaSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """``y + sigma(t0) * z``: the perturbed condition CSM starts from."""
    noise = torch.randn(y.shape, generator=generator, dtype=y.dtype, device=y.device)
    return y + sigma_at(schedule, t0) * noise


def sample_csm(
    model: ScoreSource,
    y: torch.Tensor,
    config: SamplerConfig,
    schedule: Optional[SigmaSchedule] = None,
) -> SampleResult:
    """Conditional sampling: denoise the perturbed condition with an unconditional score."""
    config.validate()
    if model.conditional or not model.noise_conditioned:
        raise SamplerMisuseError("CSM needs an unconditionally trained score model")
    schedule = schedule or model.schedule  # type: ignore[attr-defined]
    batch, squeeze = _batched(y)
    generator = torch.Generator().manual_seed(int(config.seed))

    with torch.no_grad():
        x = csm_initial_state(batch, config.t0, schedule, generator)
        x, trace = _run_chain(model, x, None, config, schedule, config.t0, generator)
    if config.clamp_output:
        x = x.clamp(0.0, 1.0)
    return SampleResult(image=x[0] if squeeze else x, trace=trace)


def sample_ctm(
    model: ScoreSource,
    y: torch.Tensor,
    config: SamplerConfig,
    schedule: Optional[SigmaSchedule] = None,
) -> SampleResult:
    """Conditional training: sample from the prior with the condition at every score call."""
    config.validate()
    if not model.conditional or not model.noise_conditioned:
        raise SamplerMisuseError("CTM needs a conditionally trained score model")
    schedule = schedule or model.schedule  # type: ignore[attr-defined]
    batch, squeeze = _batched(y)
    generator = torch.Generator().manual_seed(int(config.seed))

    with torch.no_grad():
        x = prior_sample(batch.shape, schedule, generator, dtype=batch.dtype, device=batch.device)
        x, trace = _run_chain(model, x, batch, config, schedule, 1.0, generator)
    if config.clamp_output:
        x = x.clamp(0.0, 1.0)
    return SampleResult(image=x[0] if squeeze else x, trace=trace)


def sample_unconditional(
    model: ScoreSource,
    shape: Tuple[int, ...],
    config: SamplerConfig,
    schedule: Optional[SigmaSchedule] = None,
    *,
    dtype: torch.dtype = torch.float64,
) -> SampleResult:
    """Plain generation from the prior over the full time range, without a condition."""
    config.validate()
    if model.conditional or not model.noise_conditioned:
        raise SamplerMisuseError("Unconditional sampling needs an unconditional score model")
    schedule = schedule or model.schedule  # type: ignore[attr-defined]
    generator = torch.Generator().manual_seed(int(config.seed))
    with torch.no_grad():
        x = prior_sample(shape, schedule, generator, dtype=dtype)
        x, trace = _run_chain(model, x, None, config, schedule, 1.0, generator)
    if config.clamp_output:
        x = x.clamp(0.0, 1.0)
    return SampleResult(image=x, trace=trace)


def sample_unet(model, y: torch.Tensor) -> SampleResult:
    """Single deterministic U-Net pass."""
    if model.noise_conditioned:
        raise SamplerMisuseError("sample_unet needs the U-Net baseline")
    batch, squeeze = _batched(y)
    with torch.no_grad():
        out = model.unet_forward(batch.to(next(model.parameters()).dtype))
    return SampleResult(image=out[0] if squeeze else out)


def sample(method: str, model, y: torch.Tensor, config: SamplerConfig) -> SampleResult:
    """Dispatch on ``csm`` / ``ctm`` / ``unet``."""
    if method == "csm":
        return sample_csm(model, y, config)
    if method == "ctm":
        return sample_ctm(model, y, config)
    if method == "unet":
        return sample_unet(model, y)
    raise SamplerMisuseError(f"Unknown method '{method}', expected csm, ctm or unet")
