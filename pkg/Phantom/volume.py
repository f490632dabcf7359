"""Procedural leg phantoms standing in for clinical CT volumes.

A phantom is a soft-tissue body shaped like an elliptic cylinder along ``z``
holding two or three bone inclusions: a femur-like shaft above the joint line, a
tibia-like shaft below it and optionally a patella-like ellipsoid in front of the
joint. Occupancy is computed with sub-voxel supersampling so that boundaries are
partial-volume smooth, which keeps line integrals close to analytic chord lengths.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Tuple

import torch

logger = logging.getLogger(__name__)

Interval = Tuple[float, float]
InsideFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]

# Clearance kept between a bone surface and the body surface, in mm.
_BONE_MARGIN_MM = 2.0
# Peak relative bulge of the body radius around the joint line.
_KNEE_BULGE = 0.08


class PhantomParameterError(ValueError):
    """Raised when phantom parameters are invalid or the bones cannot fit."""


@dataclass
class PhantomParams:
    """Random ranges (mm) and attenuation values used by :func:`build_phantom`."""

    seed: int = 0
    leg_radius_range: Interval = (26.0, 32.0)
    bone_radius_range: Interval = (6.0, 9.0)
    bone_offset_range: Interval = (0.0, 5.0)
    soft_tissue_mu: float = 0.02
    bone_mu: float = 0.05
    n_bones: int = 3
    grid_size: Tuple[int, int, int] = (64, 64, 64)
    spacing: float = 1.25
    supersample: int = 2

    def __post_init__(self) -> None:
        self.leg_radius_range = tuple(self.leg_radius_range)  # type: ignore[assignment]
        self.bone_radius_range = tuple(self.bone_radius_range)  # type: ignore[assignment]
        self.bone_offset_range = tuple(self.bone_offset_range)  # type: ignore[assignment]
        self.grid_size = tuple(int(n) for n in self.grid_size)  # type: ignore[assignment]

    def validate(self) -> None:
        for name in ("leg_radius_range", "bone_radius_range"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise PhantomParameterError(f"{name} must be a positive, non-empty interval, got {(lo, hi)}")
        lo, hi = self.bone_offset_range
        if not 0.0 <= lo <= hi:
            raise PhantomParameterError(f"bone_offset_range must be a non-empty interval, got {(lo, hi)}")
        if not self.bone_mu > self.soft_tissue_mu > 0.0:
            raise PhantomParameterError(
                f"Need bone_mu > soft_tissue_mu > 0, got bone_mu={self.bone_mu}, "
                f"soft_tissue_mu={self.soft_tissue_mu}"
            )
        if self.n_bones not in (2, 3):
            raise PhantomParameterError(f"n_bones must be 2 or 3, got {self.n_bones}")
        if len(self.grid_size) != 3 or min(self.grid_size) < 2:
            raise PhantomParameterError(f"grid_size must hold three sizes >= 2, got {self.grid_size}")
        if self.spacing <= 0.0 or self.supersample < 1:
            raise PhantomParameterError("spacing must be positive and supersample >= 1")

        nx, ny, nz = self.grid_size
        half_extent = 0.5 * (min(nx, ny) - 1) * self.spacing
        body_max = self.leg_radius_range[1] * (1.0 + _KNEE_BULGE)
        if body_max > half_extent:
            raise PhantomParameterError(
                f"Leg radius up to {body_max:.2f} mm does not fit the {half_extent:.2f} mm half field of view"
            )
        # Worst case: smallest body, largest bone at the largest offset.
        needed = self.bone_radius_range[1] + self.bone_offset_range[1] + _BONE_MARGIN_MM
        if needed > self.leg_radius_range[0] * (1.0 - _KNEE_BULGE):
            raise PhantomParameterError(
                f"Bones need {needed:.2f} mm of radius but the body may be as thin as "
                f"{self.leg_radius_range[0] * (1.0 - _KNEE_BULGE):.2f} mm"
            )

    def with_seed(self, seed: int) -> "PhantomParams":
        return replace(self, seed=seed)


@dataclass
class VolumeGrid:
    """Voxel grid indexed ``[z, y, x]`` with isotropic ``spacing`` in mm."""

    attenuation: torch.Tensor
    bone_mask: torch.Tensor
    spacing: float
    description: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.attenuation.dim() != 3:
            raise PhantomParameterError("attenuation must be a 3-D tensor indexed [z, y, x]")
        if self.bone_mask.shape != self.attenuation.shape:
            raise PhantomParameterError("bone_mask must share the attenuation shape")

    @property
    def nz(self) -> int:
        return int(self.attenuation.shape[0])

    @property
    def ny(self) -> int:
        return int(self.attenuation.shape[1])

    @property
    def nx(self) -> int:
        return int(self.attenuation.shape[2])

    def bone_volume(self) -> "VolumeGrid":
        """Indicator volume of the bone mask; its projection is the bone path length."""
        return VolumeGrid(
            attenuation=self.bone_mask.to(self.attenuation.dtype),
            bone_mask=self.bone_mask.clone(),
            spacing=self.spacing,
        )


def voxel_axes(grid_size: Tuple[int, int, int], spacing: float, dtype=torch.float64):
    """Physical coordinates (mm) of voxel centres along x, y and z."""
    nx, ny, nz = grid_size
    axes = []
    for n in (nx, ny, nz):
        axes.append((torch.arange(n, dtype=dtype) - 0.5 * (n - 1)) * spacing)
    return tuple(axes)


def occupancy(
    inside: InsideFn,
    grid_size: Tuple[int, int, int],
    spacing: float,
    *,
    supersample: int = 2,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """Fraction of every voxel covered by the shape ``inside(x, y, z)``.

    Evaluated slab by slab along ``z`` with ``supersample ** 3`` sub-points
    per voxel.
    """
    nx, ny, nz = grid_size
    xs, ys, zs = voxel_axes(grid_size, spacing, dtype)
    offsets = ((torch.arange(supersample, dtype=dtype) + 0.5) / supersample - 0.5) * spacing
    sub_x = (xs[:, None] + offsets[None, :]).reshape(-1)
    sub_y = (ys[:, None] + offsets[None, :]).reshape(-1)
    yy, xx = torch.meshgrid(sub_y, sub_x, indexing="ij")

    out = torch.empty((nz, ny, nx), dtype=dtype)
    for k in range(nz):
        hits = torch.zeros((ny * supersample, nx * supersample), dtype=dtype)
        for dz in offsets:
            z = torch.full_like(xx, float(zs[k] + dz))
            hits += inside(xx, yy, z).to(dtype)
        hits = hits.view(ny, supersample, nx, supersample).sum(dim=(1, 3))
        out[k] = hits / float(supersample**3)
    return out


def uniform_cylinder(
    grid_size: Tuple[int, int, int],
    spacing: float,
    radius: float,
    mu: float,
    *,
    supersample: int = 4,
) -> VolumeGrid:
    """Centred cylinder along ``z`` with constant attenuation ``mu``."""
    frac = occupancy(
        lambda x, y, z: x * x + y * y <= radius * radius,
        grid_size,
        spacing,
        supersample=supersample,
    )
    return VolumeGrid(attenuation=frac * mu, bone_mask=torch.zeros_like(frac, dtype=torch.bool), spacing=spacing)


def _uniform(generator: torch.Generator, interval: Interval) -> float:
    lo, hi = interval
    return lo + (hi - lo) * float(torch.rand((), generator=generator, dtype=torch.float64))


def _random_offset(generator: torch.Generator, interval: Interval) -> Tuple[float, float]:
    magnitude = _uniform(generator, interval)
    angle = 2.0 * math.pi * float(torch.rand((), generator=generator, dtype=torch.float64))
    return magnitude * math.cos(angle), magnitude * math.sin(angle)


def build_phantom(params: PhantomParams) -> VolumeGrid:
    """Deterministically synthesise a leg phantom from ``params.seed``."""
    params.validate()
    generator = torch.Generator().manual_seed(int(params.seed))

    nx, ny, nz = params.grid_size
    half_z = 0.5 * (nz - 1) * params.spacing

    a = _uniform(generator, params.leg_radius_range)
    b = _uniform(generator, params.leg_radius_range)
    joint_z = _uniform(generator, (-0.15 * half_z, 0.15 * half_z))
    bulge_width = 0.35 * half_z
    gap = 0.5 * _uniform(generator, params.bone_radius_range)

    def body_scale(z: torch.Tensor) -> torch.Tensor:
        return 1.0 + _KNEE_BULGE * torch.exp(-((z - joint_z) / bulge_width) ** 2) - 0.5 * _KNEE_BULGE

    def inside_body(x: torch.Tensor, y: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        s = body_scale(z)
        return (x / (a * s)) ** 2 + (y / (b * s)) ** 2 <= 1.0

    shapes: Dict[str, InsideFn] = {}

    femur_r = _uniform(generator, params.bone_radius_range)
    femur_c = _random_offset(generator, params.bone_offset_range)

    def inside_femur(x, y, z, r=femur_r, c=femur_c):
        dx, dy = x - c[0], y - c[1]
        shaft = (dx * dx + dy * dy <= r * r) & (z >= joint_z + gap + r)
        condyle = dx * dx + dy * dy + (z - joint_z - gap - r) ** 2 <= r * r
        return shaft | condyle

    shapes["femur"] = inside_femur

    tibia_r = _uniform(generator, params.bone_radius_range)
    tibia_c = _random_offset(generator, params.bone_offset_range)

    def inside_tibia(x, y, z, r=tibia_r, c=tibia_c):
        dx, dy = x - c[0], y - c[1]
        shaft = (dx * dx + dy * dy <= r * r) & (z <= joint_z - gap - r)
        plateau = dx * dx + dy * dy + (z - joint_z + gap + r) ** 2 <= r * r
        return shaft | plateau

    shapes["tibia"] = inside_tibia

    if params.n_bones == 3:
        patella_r = 0.6 * _uniform(generator, params.bone_radius_range)
        # In front of the joint, kept inside the thinnest admissible body.
        reach = params.leg_radius_range[0] * (1.0 - _KNEE_BULGE) - _BONE_MARGIN_MM - patella_r
        front = max(0.0, min(reach, 0.7 * b * (1.0 - 0.5 * _KNEE_BULGE) - patella_r))

        def inside_patella(x, y, z, r=patella_r, yc=front):
            return (x / (1.4 * r)) ** 2 + ((y - yc) / (0.7 * r)) ** 2 + ((z - joint_z) / r) ** 2 <= 1.0

        shapes["patella"] = inside_patella

    body = occupancy(inside_body, params.grid_size, params.spacing, supersample=params.supersample)
    bones = torch.zeros_like(body)
    for name, inside in shapes.items():
        frac = occupancy(inside, params.grid_size, params.spacing, supersample=params.supersample)
        bones = torch.maximum(bones, frac)

    # Bones are interior to the body, so bone occupancy never exceeds body occupancy.
    bones = torch.minimum(bones, body)
    attenuation = params.soft_tissue_mu * body + (params.bone_mu - params.soft_tissue_mu) * bones
    bone_mask = bones > 0.0

    logger.debug(
        "Phantom seed=%s: body semi-axes (%.1f, %.1f) mm, %d bones, %d bone voxels",
        params.seed,
        a,
        b,
        len(shapes),
        int(bone_mask.sum()),
    )
    return VolumeGrid(
        attenuation=attenuation,
        bone_mask=bone_mask,
        spacing=params.spacing,
        description={"semi_axis_x": a, "semi_axis_y": b, "joint_z": joint_z, "n_bones": float(len(shapes))},
    )
