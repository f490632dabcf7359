"""Utilities to resolve and validate a generated dataset directory.

Training and evaluation need a manifest plus every image it references. These
helpers inspect a configured directory, try a few sensible absolute variants of
relative paths and explain what is missing so the caller can surface a clear
error instead of failing halfway through an epoch.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, List

from Phantom.dataset import MANIFEST_NAME, DatasetManifest

logger = logging.getLogger(__name__)


class DatasetIncompleteError(RuntimeError):
    """Raised when a dataset directory lacks its manifest or image files."""


def project_root() -> Path:
    """Return the repository root directory."""
    return Path(__file__).resolve().parents[1]


def _missing_files(directory: Path) -> List[str]:
    manifest = DatasetManifest.read(directory)
    missing: List[str] = []
    for record in manifest.records:
        for relative in (record.radiograph_path, record.contour_path, record.contour_bone_path):
            if not (directory / relative).exists():
                missing.append(relative)
    return missing


def describe_dataset_status(directory: Path) -> str:
    """Return a human readable description of why ``directory`` is incomplete."""
    directory = directory.expanduser()
    if not (directory / MANIFEST_NAME).exists():
        return f"missing files: {MANIFEST_NAME}"
    try:
        missing = _missing_files(directory)
    except ValueError as exc:
        return f"unreadable manifest: {exc}"
    if not missing:
        return "complete"
    shown = ", ".join(sorted(missing)[:5])
    more = f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""
    return f"missing images: {shown}{more}"


def is_dataset_dir_complete(directory: Path) -> bool:
    """Check whether ``directory`` holds a readable manifest and all its images."""
    directory = directory.expanduser()
    if not directory.is_dir() or not (directory / MANIFEST_NAME).exists():
        return False
    try:
        return not _missing_files(directory)
    except ValueError:
        return False


def _candidate_directories(preferred: Path) -> Iterable[Path]:
    expanded = preferred.expanduser()
    candidates = [expanded]
    if not expanded.is_absolute():
        candidates.append(project_root() / expanded)
        candidates.append(Path.cwd() / expanded)

    seen: set[Path] = set()
    for candidate in candidates:
        candidate = candidate.resolve(strict=False)
        if candidate not in seen:
            seen.add(candidate)
            yield candidate


def resolve_dataset_directory(preferred: Path, *, log: logging.Logger | None = None) -> Path:
    """Return the first complete dataset directory among the variants of ``preferred``.

    Raises :class:`DatasetIncompleteError` describing the preferred location when
    none of the candidates is usable.
    """
    logger_obj = log or logger
    candidates = list(_candidate_directories(Path(preferred)))
    for candidate in candidates:
        if is_dataset_dir_complete(candidate):
            if candidate != candidates[0]:
                logger_obj.info("Dataset '%s' resolved to '%s'", preferred, candidate)
            return candidate
    status = describe_dataset_status(candidates[0])
    raise DatasetIncompleteError(f"Dataset directory '{preferred}' is not usable ({status}); run gen-data first")
