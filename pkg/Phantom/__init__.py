"""Procedural leg phantoms, parallel-beam radiographs and segmentation conditions."""

from .dataset import DatasetConfig, DatasetManifest, ManifestRecord, build_dataset, load_split
from .projector import GeometryMismatchError, ProjectionGeometry, forward_project
from .segmentation import (
    DegenerateInputError,
    bone_segmentation,
    contour_segmentation,
    normalize_set,
)
from .volume import PhantomParameterError, PhantomParams, VolumeGrid, build_phantom

__all__ = [
    "DatasetConfig",
    "DatasetManifest",
    "DegenerateInputError",
    "GeometryMismatchError",
    "ManifestRecord",
    "PhantomParameterError",
    "PhantomParams",
    "ProjectionGeometry",
    "VolumeGrid",
    "bone_segmentation",
    "build_dataset",
    "build_phantom",
    "contour_segmentation",
    "forward_project",
    "load_split",
    "normalize_set",
]
