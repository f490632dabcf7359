"""Split evaluation: run each method on every test condition and aggregate MAE / PSNR."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from Metrics.image_quality import PSNR_CAP_DB, capped_psnr, dice, mae, psnr
from Phantom.dataset import CONDITION_TYPES, DatasetManifest, load_pair
from Phantom.dataset_utils import DatasetIncompleteError
from Phantom.pgm import write_pgm
from Phantom.segmentation import contour_segmentation
from Sampling.samplers import SamplerConfig, sample

logger = logging.getLogger(__name__)

METHODS = ("unet", "csm", "ctm")
REPORT_NAME = "eval_report.tsv"
DETAIL_NAME = "eval_images.tsv"

ROW_FIELDS = (
    "method",
    "condition_type",
    "mae_mean",
    "mae_std",
    "psnr_mean_db",
    "psnr_std_db",
    "n_images",
    "n_psnr_capped",
    "contour_dice_mean",
)
DETAIL_FIELDS = (
    "method",
    "condition_type",
    "phantom_id",
    "view_index",
    "mae",
    "psnr_db",
    "psnr_capped",
    "contour_dice",
)


@dataclass
class EvalConfig:
    methods: Tuple[str, ...] = METHODS
    condition_types: Tuple[str, ...] = CONDITION_TYPES
    split: str = "test"
    psnr_cap_db: float = PSNR_CAP_DB
    max_images: Optional[int] = None
    save_samples: bool = False
    show_progress: bool = True

    def __post_init__(self) -> None:
        self.methods = tuple(self.methods)
        self.condition_types = tuple(self.condition_types)

    def validate(self) -> None:
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"Unknown methods {unknown}, expected a subset of {METHODS}")
        unknown = [c for c in self.condition_types if c not in CONDITION_TYPES]
        if unknown:
            raise ValueError(f"Unknown condition types {unknown}, expected a subset of {CONDITION_TYPES}")
        if self.max_images is not None and self.max_images < 1:
            raise ValueError("max_images must be >= 1 when set")


@dataclass
class ImageScore:
    method: str
    condition_type: str
    phantom_id: int
    view_index: int
    mae: float
    psnr_db: float
    psnr_capped: bool
    contour_dice: float

    def to_line(self) -> str:
        return "\t".join(
            [
                self.method,
                self.condition_type,
                str(self.phantom_id),
                str(self.view_index),
                f"{self.mae:.9g}",
                f"{self.psnr_db:.9g}",
                str(int(self.psnr_capped)),
                f"{self.contour_dice:.9g}",
            ]
        )


@dataclass
class EvalRow:
    """One (method, condition type) cell group of the report."""

    method: str
    condition_type: str
    mae_mean: float
    mae_std: float
    psnr_mean_db: float
    psnr_std_db: float
    n_images: int
    n_psnr_capped: int = 0
    contour_dice_mean: float = float("nan")

    @classmethod
    def from_scores(cls, scores: Sequence[ImageScore]) -> "EvalRow":
        if not scores:
            raise ValueError("Cannot aggregate an empty score list")
        maes = np.array([s.mae for s in scores], dtype=np.float64)
        psnrs = np.array([s.psnr_db for s in scores], dtype=np.float64)
        dices = np.array([s.contour_dice for s in scores], dtype=np.float64)
        # Population standard deviation (ddof=0).
        return cls(
            method=scores[0].method,
            condition_type=scores[0].condition_type,
            mae_mean=float(maes.mean()),
            mae_std=float(maes.std(ddof=0)),
            psnr_mean_db=float(psnrs.mean()),
            psnr_std_db=float(psnrs.std(ddof=0)),
            n_images=len(scores),
            n_psnr_capped=sum(1 for s in scores if s.psnr_capped),
            contour_dice_mean=float(dices.mean()),
        )

    @classmethod
    def from_line(cls, line: str) -> "EvalRow":
        parts = line.split("\t")
        if len(parts) != len(ROW_FIELDS):
            raise ValueError(f"Report row needs {len(ROW_FIELDS)} fields, got {len(parts)}: {line!r}")
        return cls(
            method=parts[0],
            condition_type=parts[1],
            mae_mean=float(parts[2]),
            mae_std=float(parts[3]),
            psnr_mean_db=float(parts[4]),
            psnr_std_db=float(parts[5]),
            n_images=int(parts[6]),
            n_psnr_capped=int(parts[7]),
            contour_dice_mean=float(parts[8]),
        )

    def to_line(self) -> str:
        return "\t".join(
            [
                self.method,
                self.condition_type,
                f"{self.mae_mean:.9g}",
                f"{self.mae_std:.9g}",
                f"{self.psnr_mean_db:.9g}",
                f"{self.psnr_std_db:.9g}",
                str(self.n_images),
                str(self.n_psnr_capped),
                f"{self.contour_dice_mean:.9g}",
            ]
        )


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    details: List[ImageScore] = field(default_factory=list)
    header: Dict[str, str] = field(default_factory=dict)

    def row(self, method: str, condition_type: str) -> EvalRow:
        for row in self.rows:
            if row.method == method and row.condition_type == condition_type:
                return row
        raise KeyError(f"No report row for ({method}, {condition_type})")

    def write(self, out_dir: Path) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        header = [f"# {key}: {value}" for key, value in sorted(self.header.items())]

        report_path = out_dir / REPORT_NAME
        lines = header + ["\t".join(ROW_FIELDS)] + [row.to_line() for row in self.rows]
        report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

        detail_path = out_dir / DETAIL_NAME
        lines = ["\t".join(DETAIL_FIELDS)] + [score.to_line() for score in self.details]
        detail_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        logger.info("Wrote evaluation report to %s", report_path)
        return report_path, detail_path

    @classmethod
    def read(cls, path: Path) -> "EvalReport":
        """Rows and header of an ``eval_report.tsv`` (a file or the directory holding it)."""
        path = Path(path)
        if path.is_dir():
            path = path / REPORT_NAME
        report = cls()
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                report.header[key] = value
            elif line.strip() and line != "\t".join(ROW_FIELDS):
                report.rows.append(EvalRow.from_line(line))
        return report


def ordering_failures(report: EvalReport, dice_floor: float = 0.9) -> List[str]:
    """Broken desk-scale orderings, one message each; empty when the report passes.

    Per condition type: CTM beats U-Net and CSM on MAE, U-Net beats CSM on PSNR
    and CSM outputs keep their contour (Dice >= ``dice_floor``). Across condition
    types: CTM with contour+bone beats CTM with the contour alone on MAE.
    """
    failures: List[str] = []
    rows = {(row.method, row.condition_type): row for row in report.rows}
    missing = [f"{m}/{c}" for c in CONDITION_TYPES for m in METHODS if (m, c) not in rows]
    if missing:
        return [f"missing rows: {', '.join(missing)}"]

    for condition_type in CONDITION_TYPES:
        unet, csm, ctm = (rows[(m, condition_type)] for m in METHODS)
        if not ctm.mae_mean < unet.mae_mean:
            failures.append(f"{condition_type}: MAE ctm {ctm.mae_mean:.5f} >= unet {unet.mae_mean:.5f}")
        if not ctm.mae_mean < csm.mae_mean:
            failures.append(f"{condition_type}: MAE ctm {ctm.mae_mean:.5f} >= csm {csm.mae_mean:.5f}")
        if not csm.psnr_mean_db < unet.psnr_mean_db:
            failures.append(
                f"{condition_type}: PSNR csm {csm.psnr_mean_db:.3f} dB >= unet {unet.psnr_mean_db:.3f} dB"
            )
        if not csm.contour_dice_mean >= dice_floor:
            failures.append(f"{condition_type}: csm contour Dice {csm.contour_dice_mean:.4f} < {dice_floor:g}")

    rich, plain = rows[("ctm", "contour_bone")], rows[("ctm", "contour")]
    if not rich.mae_mean < plain.mae_mean:
        failures.append(f"MAE ctm contour_bone {rich.mae_mean:.5f} >= ctm contour {plain.mae_mean:.5f}")
    return failures


def _model_dtype(model) -> torch.dtype:
    try:
        return next(model.parameters()).dtype
    except (AttributeError, StopIteration):
        return torch.float64


def evaluate_split(
    method: str,
    model,
    manifest: DatasetManifest,
    condition_type: str,
    sampler_config: SamplerConfig,
    *,
    split: str = "test",
    psnr_cap_db: float = PSNR_CAP_DB,
    max_images: Optional[int] = None,
    sample_dir: Optional[Path] = None,
    show_progress: bool = False,
) -> Tuple[EvalRow, List[ImageScore]]:
    """Sample once per condition of ``split`` and score against the paired radiograph.

    Image ``i`` is sampled with seed ``sampler_config.seed + i`` so the whole
    evaluation is reproducible from one seed.
    """
    if method not in METHODS:
        raise ValueError(f"Unknown method '{method}', expected one of {METHODS}")
    records = manifest.split(split)
    if max_images is not None:
        records = records[:max_images]
    if not records:
        raise DatasetIncompleteError(f"Split '{split}' of {manifest.path} has no images to evaluate")

    dtype = _model_dtype(model)
    scores: List[ImageScore] = []
    for index, record in enumerate(
        tqdm(records, desc=f"{method}/{condition_type}", disable=not show_progress, leave=False)
    ):
        label, condition = load_pair(manifest, record, condition_type, dtype)
        config = replace(sampler_config, seed=sampler_config.seed + index, show_progress=False)
        prediction = sample(method, model, condition, config).image.to(label.dtype)

        value, capped = capped_psnr(psnr(prediction, label), psnr_cap_db)
        if capped:
            logger.warning(
                "PSNR capped at %.1f dB for %s/%s phantom %d view %d",
                psnr_cap_db,
                method,
                condition_type,
                record.phantom_id,
                record.view_index,
            )
        scores.append(
            ImageScore(
                method=method,
                condition_type=condition_type,
                phantom_id=record.phantom_id,
                view_index=record.view_index,
                mae=mae(prediction, label),
                psnr_db=value,
                psnr_capped=capped,
                contour_dice=dice(contour_segmentation(prediction), contour_segmentation(label)),
            )
        )
        if sample_dir is not None:
            name = f"p{record.phantom_id:03d}_v{record.view_index:03d}_{method}_{condition_type}.pgm"
            write_pgm(Path(sample_dir) / name, prediction)

    row = EvalRow.from_scores(scores)
    logger.info(
        "%s/%s: MAE %.4f ± %.4f, PSNR %.2f ± %.2f dB over %d images",
        method,
        condition_type,
        row.mae_mean,
        row.mae_std,
        row.psnr_mean_db,
        row.psnr_std_db,
        row.n_images,
    )
    return row, scores


def evaluate_methods(
    models: Mapping[Tuple[str, str], object],
    manifest: DatasetManifest,
    eval_config: EvalConfig,
    sampler_config: SamplerConfig,
    *,
    header: Optional[Mapping[str, str]] = None,
    sample_dir: Optional[Path] = None,
) -> EvalReport:
    """Evaluate every ``(method, condition_type)`` pair in ``models`` in config order."""
    eval_config.validate()
    report = EvalReport(
        header={
            "split": eval_config.split,
            "std": "population (ddof=0)",
            "psnr_cap_db": f"{eval_config.psnr_cap_db:g}",
            "sampler_seed": str(sampler_config.seed),
            "samples_per_condition": "1",
            **dict(header or {}),
        }
    )
    for method in eval_config.methods:
        for condition_type in eval_config.condition_types:
            model = models.get((method, condition_type))
            if model is None:
                logger.info("No %s model for %s conditions; skipped", method, condition_type)
                continue
            row, scores = evaluate_split(
                method,
                model,
                manifest,
                condition_type,
                sampler_config,
                split=eval_config.split,
                psnr_cap_db=eval_config.psnr_cap_db,
                max_images=eval_config.max_images,
                sample_dir=sample_dir if eval_config.save_samples else None,
                show_progress=eval_config.show_progress,
            )
            report.rows.append(row)
            report.details.extend(scores)
    return report
