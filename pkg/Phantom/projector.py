"""Parallel-beam forward projection of voxel volumes.

Rays travel in the ``x-y`` plane and the source rotates about the ``z`` axis, so
detector rows follow ``z`` (row 0 at the largest ``z``) and detector columns follow
the in-plane coordinate ``u`` perpendicular to the ray. Line integrals are taken
Joseph style: the volume is sampled trilinearly at equidistant points along every
ray and the samples are summed times the step length. Trilinear sampling is
linear in the volume, so the projector is a linear operator.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn.functional as F

from Phantom.volume import VolumeGrid

logger = logging.getLogger(__name__)

# Upper bound on the number of ray samples evaluated in one grid_sample call.
_MAX_SAMPLES_PER_CHUNK = 4_000_000


class GeometryMismatchError(ValueError):
    """Raised when a projection geometry is invalid or incompatible with a request."""


@dataclass
class ProjectionGeometry:
    """Full-circle parallel-beam sweep onto a flat detector."""

    n_views: int = 60
    angular_increment: float = 6.0
    detector_h: int = 64
    detector_w: int = 64
    detector_pixel_size: float = 1.25
    beam: str = "parallel"
    step_fraction: float = 0.5

    def validate(self) -> None:
        if self.beam != "parallel":
            raise GeometryMismatchError(f"Only parallel-beam geometry is supported, got '{self.beam}'")
        if self.n_views < 1 or not math.isclose(self.n_views * self.angular_increment, 360.0, abs_tol=1e-9):
            raise GeometryMismatchError(
                f"n_views * angular_increment must equal 360, got {self.n_views} * {self.angular_increment}"
            )
        if self.detector_h < 1 or self.detector_w < 1 or self.detector_pixel_size <= 0.0:
            raise GeometryMismatchError("Detector dimensions and pixel size must be positive")
        if not 0.0 < self.step_fraction <= 1.0:
            raise GeometryMismatchError(f"step_fraction must lie in (0, 1], got {self.step_fraction}")

    def angle_degrees(self, view_index: int) -> float:
        return view_index * self.angular_increment


def _normaliser(n: int, spacing: float) -> float:
    # grid_sample with align_corners=True maps -1/+1 to the first/last voxel centre.
    return 0.5 * (n - 1) * spacing if n > 1 else 1.0


def forward_project(
    vol: VolumeGrid,
    geom: ProjectionGeometry,
    view_index: int,
    *,
    dtype: Optional[torch.dtype] = None,
) -> torch.Tensor:
    """Line integrals of ``vol`` for one view, returned as a ``(1, H, W)`` image."""
    geom.validate()
    if not 0 <= view_index < geom.n_views:
        raise GeometryMismatchError(f"view_index {view_index} outside [0, {geom.n_views})")

    dtype = dtype or vol.attenuation.dtype
    volume = vol.attenuation.to(dtype)[None, None]  # (1, 1, nz, ny, nx)
    spacing = vol.spacing

    theta = math.radians(geom.angle_degrees(view_index))
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    height, width = geom.detector_h, geom.detector_w
    pixel = geom.detector_pixel_size
    u = (torch.arange(width, dtype=dtype) - 0.5 * (width - 1)) * pixel
    z = (0.5 * (height - 1) - torch.arange(height, dtype=dtype)) * pixel

    # Rays cover the circumscribed circle of the in-plane extent plus one voxel.
    half_x = 0.5 * vol.nx * spacing
    half_y = 0.5 * vol.ny * spacing
    reach = math.hypot(half_x, half_y) + spacing
    step = geom.step_fraction * spacing
    n_samples = int(math.ceil(2.0 * reach / step))
    s = -reach + (torch.arange(n_samples, dtype=dtype) + 0.5) * step

    px = (u[:, None] * -sin_t + s[None, :] * cos_t) / _normaliser(vol.nx, spacing)
    py = (u[:, None] * cos_t + s[None, :] * sin_t) / _normaliser(vol.ny, spacing)
    pz = z / _normaliser(vol.nz, spacing)

    rows_per_chunk = max(1, _MAX_SAMPLES_PER_CHUNK // (width * n_samples))
    out = torch.empty((height, width), dtype=dtype)
    for start in range(0, height, rows_per_chunk):
        stop = min(height, start + rows_per_chunk)
        rows = stop - start
        grid = torch.stack(
            (
                px[None].expand(rows, width, n_samples),
                py[None].expand(rows, width, n_samples),
                pz[start:stop, None, None].expand(rows, width, n_samples),
            ),
            dim=-1,
        )[None]
        samples = F.grid_sample(volume, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
        out[start:stop] = samples[0, 0].sum(dim=-1) * step
    return out[None]


def project_sweep(vol: VolumeGrid, geom: ProjectionGeometry, **kwargs) -> List[torch.Tensor]:
    """Project every view of the sweep."""
    return [forward_project(vol, geom, view, **kwargs) for view in range(geom.n_views)]
