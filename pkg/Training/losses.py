"""Denoising score matching and L1 regression objectives."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch

from SDE.ve_sde import SigmaSchedule, kernel_score, perturb, sigma_at, uniform_time
from ScoreNet.model import ModelConfigError, ScoreModel

logger = logging.getLogger(__name__)

WEIGHTINGS = ("sigma_squared", "none")


class NonFiniteLossError(RuntimeError):
    """Raised when a loss evaluates to NaN or infinity."""


@dataclass
class LossResult:
    """Batch loss plus the per-sample pieces it was built from."""

    loss: torch.Tensor
    per_sample: torch.Tensor
    t: Optional[torch.Tensor] = None
    sigma: Optional[torch.Tensor] = None
    residual_norm: Optional[torch.Tensor] = None


def _check_batch(images: torch.Tensor) -> None:
    if images.numel() and (float(images.min()) < 0.0 or float(images.max()) > 1.0):
        raise ValueError("Training images must lie in [0, 1]")


def dsm_loss(
    model: ScoreModel,
    images: torch.Tensor,
    conditions: Optional[torch.Tensor],
    schedule: SigmaSchedule,
    generator: torch.Generator,
    *,
    t_eps: float = 1e-5,
    weighting: str = "sigma_squared",
    t: Optional[torch.Tensor] = None,
    noise: Optional[torch.Tensor] = None,
) -> LossResult:
    """Mean over the batch of ``w(t) * ||s(x_t, [y], t) - grad log p(x_t | x_0)||^2``.

    The squared norm sums over pixels, so a zero predictor under
    ``sigma_squared`` weighting scores ``||z||^2`` per sample. ``t`` and
    ``noise`` are drawn from ``generator`` unless given.
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"Unknown loss weighting '{weighting}', expected one of {WEIGHTINGS}")
    if model.conditional != (conditions is not None):
        raise ModelConfigError("Conditions must be supplied exactly when the model is conditional")
    _check_batch(images)

    batch = images.shape[0]
    if t is None:
        t = uniform_time(batch, generator, t_eps=t_eps, dtype=images.dtype, device=images.device)
    if noise is None:
        noise = torch.randn(images.shape, generator=generator, dtype=images.dtype, device=images.device)

    xt = perturb(images, schedule, t, noise)
    target = kernel_score(xt, images, schedule, t)
    residual = model.score_forward(xt, conditions, t) - target
    sq_norm = residual.pow(2).flatten(1).sum(dim=1)

    sigma = sigma_at(schedule, t)
    weight = sigma * sigma if weighting == "sigma_squared" else torch.ones_like(sigma)
    per_sample = weight * sq_norm
    loss = per_sample.mean()

    if not torch.isfinite(loss):
        worst = int(torch.argmax(torch.nan_to_num(sq_norm, nan=math.inf)))
        raise NonFiniteLossError(
            f"Non-finite DSM loss: t={float(t[worst]):.6g}, sigma_t={float(sigma[worst]):.6g}, "
            f"||r||={float(sq_norm[worst].sqrt()):.6g}"
        )
    return LossResult(loss=loss, per_sample=per_sample, t=t, sigma=sigma, residual_norm=sq_norm.sqrt())


def l1_loss(model: ScoreModel, conditions: torch.Tensor, images: torch.Tensor) -> LossResult:
    """Mean absolute error between the U-Net prediction and the radiograph."""
    if model.noise_conditioned:
        raise ModelConfigError("l1_loss trains the U-Net baseline (noise_conditioned=False)")
    prediction = model.unet_forward(conditions)
    per_sample = (prediction - images).abs().flatten(1).mean(dim=1)
    loss = per_sample.mean()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"Non-finite L1 loss ({float(loss)})")
    return LossResult(loss=loss, per_sample=per_sample)


def method_loss(
    model: ScoreModel,
    images: torch.Tensor,
    conditions: Optional[torch.Tensor],
    schedule: SigmaSchedule,
    generator: torch.Generator,
    *,
    t_eps: float = 1e-5,
    weighting: str = "sigma_squared",
) -> LossResult:
    """Objective matching the model kind; unconditional models never see conditions."""
    if not model.noise_conditioned:
        if conditions is None:
            raise ModelConfigError("The U-Net baseline trains on (condition, radiograph) pairs")
        return l1_loss(model, conditions, images)
    return dsm_loss(
        model,
        images,
        conditions if model.conditional else None,
        schedule,
        generator,
        t_eps=t_eps,
        weighting=weighting,
    )


def loss_and_gradients(model: ScoreModel, result: LossResult) -> Tuple[float, torch.Tensor]:
    """Loss value and its exact gradient as a flat vector in parameter layout order."""
    params = list(model.parameters())
    grads = torch.autograd.grad(result.loss, params, allow_unused=True)
    flat = torch.cat(
        [
            (g if g is not None else torch.zeros_like(p)).reshape(-1)
            for g, p in zip(grads, params)
        ]
    )
    return float(result.loss.detach()), flat
