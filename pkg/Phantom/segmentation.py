"""Radiograph normalisation and the two segmentation condition types."""
from __future__ import annotations

import logging
from typing import List, Sequence

import torch

from SDE.ve_sde import ShapeMismatchError

logger = logging.getLogger(__name__)

CONTOUR_VALUE = 0.5
BONE_INCREMENT = 0.5
CONTOUR_THRESHOLD = 0.1
CONDITION_LEVELS = (0.0, 0.5, 1.0)


class DegenerateInputError(ValueError):
    """Raised when a projection set has no dynamic range to normalise."""


def normalize_set(projections: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    """Map a sweep affinely onto ``[0, 1]`` using its global min and max."""
    if not projections:
        raise DegenerateInputError("Cannot normalise an empty projection set")
    lo = min(float(p.min()) for p in projections)
    hi = max(float(p.max()) for p in projections)
    if not hi > lo:
        raise DegenerateInputError(f"Projection set is constant (min = max = {lo})")
    scale = hi - lo
    return [((p - lo) / scale).clamp_(0.0, 1.0) for p in projections]


def contour_segmentation(drr: torch.Tensor, threshold: float = CONTOUR_THRESHOLD) -> torch.Tensor:
    """0.5 where the radiograph exceeds ``threshold``, 0 elsewhere."""
    return torch.where(drr > threshold, CONTOUR_VALUE, 0.0).to(drr.dtype)


def bone_leak(bone_projection: torch.Tensor, contour: torch.Tensor, bone_threshold: float = 0.0) -> torch.Tensor:
    """Pixels where bone shows up outside the contour support."""
    return (bone_projection > bone_threshold) & ~(contour > 0.0)


def bone_segmentation(
    bone_projection: torch.Tensor,
    contour: torch.Tensor,
    bone_threshold: float = 0.0,
) -> torch.Tensor:
    """Raise bone pixels of ``contour`` by 0.5, yielding 1 inside the contour."""
    if bone_projection.shape != contour.shape:
        raise ShapeMismatchError(
            f"bone projection {tuple(bone_projection.shape)} and contour {tuple(contour.shape)} differ"
        )
    bone = bone_projection > bone_threshold
    leaked = int(bone_leak(bone_projection, contour, bone_threshold).sum())
    if leaked:
        logger.warning("Bone support leaks outside the contour on %d pixels; values clamped to 1", leaked)
    out = contour + torch.where(bone, BONE_INCREMENT, 0.0).to(contour.dtype)
    return out.clamp_(max=1.0)


def snap_condition(condition: torch.Tensor) -> torch.Tensor:
    """Round decoded condition values back onto the {0, 0.5, 1} lattice."""
    return (torch.round(condition * 2.0) / 2.0).clamp_(0.0, 1.0)
