"""Variance-exploding SDE primitives."""

from .ve_sde import (
    ScheduleDomainError,
    ShapeMismatchError,
    SigmaSchedule,
    drift_diffusion,
    kernel_score,
    perturb,
    prior_sample,
    sigma_at,
)

__all__ = [
    "ScheduleDomainError",
    "ShapeMismatchError",
    "SigmaSchedule",
    "drift_diffusion",
    "kernel_score",
    "perturb",
    "prior_sample",
    "sigma_at",
]
