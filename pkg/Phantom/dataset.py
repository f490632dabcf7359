"""Dataset generation: phantoms → radiographs → conditions → manifest on disk."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import torch
from tqdm import tqdm

from Phantom.pgm import read_pgm, write_pgm
from Phantom.projector import ProjectionGeometry, forward_project, project_sweep
from Phantom.segmentation import (
    bone_leak,
    bone_segmentation,
    contour_segmentation,
    normalize_set,
    snap_condition,
)
from Phantom.volume import PhantomParams, build_phantom

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
CONDITION_TYPES = ("contour", "contour_bone")
MANIFEST_NAME = "manifest.tsv"
LEAK_HEADER = "# leaked_bone_pixels: "
MANIFEST_FIELDS = (
    "phantom_id",
    "view_index",
    "split",
    "radiograph_path",
    "contour_path",
    "contour_bone_path",
)


@dataclass(frozen=True)
class ManifestRecord:
    phantom_id: int
    view_index: int
    split: str
    radiograph_path: str
    contour_path: str
    contour_bone_path: str

    def condition_path(self, condition_type: str) -> str:
        if condition_type == "contour":
            return self.contour_path
        if condition_type == "contour_bone":
            return self.contour_bone_path
        raise ValueError(f"Unknown condition type '{condition_type}', expected one of {CONDITION_TYPES}")

    def to_line(self) -> str:
        return "\t".join(str(getattr(self, name)) for name in MANIFEST_FIELDS)


@dataclass
class DatasetManifest:
    """Records of one generated dataset; paths are relative to ``root``."""

    root: Path
    records: List[ManifestRecord] = field(default_factory=list)
    leaked_bone_pixels: int = 0

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def split(self, name: str) -> List[ManifestRecord]:
        if name not in SPLITS:
            raise ValueError(f"Unknown split '{name}', expected one of {SPLITS}")
        return [record for record in self.records if record.split == name]

    def phantoms(self, name: str) -> List[int]:
        return sorted({record.phantom_id for record in self.split(name)})

    def counts(self) -> Dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def resolve(self, relative: str) -> Path:
        return self.root / relative

    def write(self) -> Path:
        lines = [f"{LEAK_HEADER}{self.leaked_bone_pixels}", "\t".join(MANIFEST_FIELDS)]
        lines.extend(record.to_line() for record in self.records)
        self.path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return self.path

    @classmethod
    def read(cls, root: Path) -> "DatasetManifest":
        root = Path(root)
        records: List[ManifestRecord] = []
        leaked = 0
        for line_no, line in enumerate((root / MANIFEST_NAME).read_text(encoding="utf-8").splitlines(), 1):
            if line.startswith(LEAK_HEADER):
                leaked = int(line[len(LEAK_HEADER) :])
                continue
            if not line.strip() or line.startswith(("phantom_id\t", "#")):
                continue
            parts = line.split("\t")
            if len(parts) != len(MANIFEST_FIELDS):
                raise ValueError(f"{root / MANIFEST_NAME}:{line_no}: expected {len(MANIFEST_FIELDS)} fields")
            if parts[2] not in SPLITS:
                raise ValueError(f"{root / MANIFEST_NAME}:{line_no}: unknown split '{parts[2]}'")
            records.append(ManifestRecord(int(parts[0]), int(parts[1]), parts[2], parts[3], parts[4], parts[5]))
        return cls(root=root, records=records, leaked_bone_pixels=leaked)


@dataclass
class DatasetConfig:
    """Where and how :func:`build_dataset` writes the desk dataset."""

    n_phantoms: int = 16
    split_seed: int = 0
    directory: str = "data/desk"
    contour_threshold: float = 0.1
    bone_threshold: float = 0.0
    show_progress: bool = True

    def validate(self) -> None:
        split_sizes(self.n_phantoms)
        if not 0.0 <= self.contour_threshold < 1.0:
            raise ValueError(f"contour_threshold must lie in [0, 1), got {self.contour_threshold}")
        if self.bone_threshold < 0.0:
            raise ValueError(f"bone_threshold must be >= 0, got {self.bone_threshold}")


def split_sizes(n_phantoms: int) -> Tuple[int, int, int]:
    """Phantom counts per split for a 9:1:1 ratio.

    train = round(9n/11), val = max(1, round(n/11)), test takes the remainder;
    train yields phantoms until every split is non-empty.
    """
    if n_phantoms < 3:
        raise ValueError(f"Need at least 3 phantoms for a train/val/test split, got {n_phantoms}")
    n_train = int(round(9 * n_phantoms / 11))
    n_val = max(1, int(round(n_phantoms / 11)))
    n_test = n_phantoms - n_train - n_val
    while n_test < 1:
        n_train -= 1
        n_test += 1
    return n_train, n_val, n_test


def assign_splits(n_phantoms: int, split_seed: int) -> Dict[int, str]:
    """Random partition of phantom ids into train/val/test."""
    n_train, n_val, _ = split_sizes(n_phantoms)
    generator = torch.Generator().manual_seed(int(split_seed))
    order = torch.randperm(n_phantoms, generator=generator).tolist()
    assignment: Dict[int, str] = {}
    for rank, phantom_id in enumerate(order):
        if rank < n_train:
            assignment[phantom_id] = "train"
        elif rank < n_train + n_val:
            assignment[phantom_id] = "val"
        else:
            assignment[phantom_id] = "test"
    return assignment


def _image_name(phantom_id: int, view_index: int, kind: str) -> str:
    return f"images/p{phantom_id:03d}_v{view_index:03d}_{kind}.pgm"


def build_dataset(
    n_phantoms: int,
    geom: ProjectionGeometry,
    params: PhantomParams,
    split_seed: int,
    out_dir: Path,
    *,
    contour_threshold: float = 0.1,
    bone_threshold: float = 0.0,
    show_progress: bool = True,
) -> DatasetManifest:
    """Generate ``n_phantoms * n_views`` (radiograph, contour, contour+bone) triples.

    Phantom ``i`` uses seed ``params.seed + i``; splits are drawn per phantom.
    """
    geom.validate()
    params.validate()
    assignment = assign_splits(n_phantoms, split_seed)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest(root=out_dir)
    for phantom_id in tqdm(range(n_phantoms), desc="phantoms", disable=not show_progress):
        volume = build_phantom(params.with_seed(params.seed + phantom_id))
        bones = volume.bone_volume()

        drrs = normalize_set(project_sweep(volume, geom))
        for view, drr in enumerate(drrs):
            bone_projection = forward_project(bones, geom, view)
            contour = contour_segmentation(drr, contour_threshold)
            manifest.leaked_bone_pixels += int(bone_leak(bone_projection, contour, bone_threshold).sum())
            contour_bone = bone_segmentation(bone_projection, contour, bone_threshold)

            record = ManifestRecord(
                phantom_id=phantom_id,
                view_index=view,
                split=assignment[phantom_id],
                radiograph_path=_image_name(phantom_id, view, "radiograph"),
                contour_path=_image_name(phantom_id, view, "contour"),
                contour_bone_path=_image_name(phantom_id, view, "contour_bone"),
            )
            write_pgm(out_dir / record.radiograph_path, drr)
            write_pgm(out_dir / record.contour_path, contour)
            write_pgm(out_dir / record.contour_bone_path, contour_bone)
            manifest.records.append(record)

    manifest.write()
    logger.info(
        "Wrote %d radiographs for %d phantoms to %s (%s)",
        len(manifest.records),
        n_phantoms,
        out_dir,
        ", ".join(f"{name}={count}" for name, count in manifest.counts().items()),
    )
    if manifest.leaked_bone_pixels:
        logger.warning("%d bone pixels fell outside their contour", manifest.leaked_bone_pixels)
    return manifest


def load_pair(
    manifest: DatasetManifest,
    record: ManifestRecord,
    condition_type: str,
    dtype: torch.dtype = torch.float64,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(radiograph, condition) for one record, each ``(1, H, W)``."""
    image = read_pgm(manifest.resolve(record.radiograph_path), dtype)
    condition = snap_condition(read_pgm(manifest.resolve(record.condition_path(condition_type)), dtype))
    return image, condition


def load_split(
    manifest: DatasetManifest,
    split: str,
    condition_type: str = "contour",
    *,
    dtype: torch.dtype = torch.float64,
    records: Optional[Iterable[ManifestRecord]] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack a split into ``(N, 1, H, W)`` radiographs and conditions."""
    chosen = list(records) if records is not None else manifest.split(split)
    if not chosen:
        raise ValueError(f"Split '{split}' is empty in {manifest.path}")
    if any(record.split != split for record in chosen):
        raise ValueError(f"Records from other splits passed to load_split('{split}')")
    pairs = [load_pair(manifest, record, condition_type, dtype) for record in chosen]
    images = torch.stack([image for image, _ in pairs])
    conditions = torch.stack([condition for _, condition in pairs])
    return images, conditions
