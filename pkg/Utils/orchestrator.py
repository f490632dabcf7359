"""High level coordination between dataset generation, training, sampling and evaluation."""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from Metrics.evaluation import EvalReport, evaluate_methods
from Phantom.dataset import CONDITION_TYPES, DatasetManifest, build_dataset, load_pair, load_split
from Phantom.dataset_utils import resolve_dataset_directory
from Phantom.pgm import read_pgm, write_pgm
from Phantom.segmentation import snap_condition
from Sampling.samplers import SamplerMisuseError, sample
from ScoreNet.checkpoint import load_checkpoint
from ScoreNet.model import ScoreModel, build_model
from Training.trainer import TrainingSplit, TrainReport, train
from Utils.config import ConfigError, RunConfig, config_hash, write_effective_config

logger = logging.getLogger(__name__)

METHODS = ("csm", "ctm", "unet")
GALLERY_COLUMNS = ("condition", "unet", "csm", "ctm", "label")


class MissingCheckpointError(FileNotFoundError):
    """Raised when checkpoints needed by a command do not exist."""


def checkpoint_key(method: str, condition_type: Optional[str]) -> str:
    """Directory name of a trained model; CSM does not depend on the condition type."""
    if method == "csm":
        return "csm"
    if condition_type is None:
        raise ConfigError(f"{method} models are trained per condition type; pass --condition")
    return f"{method}_{condition_type}"


def check_method_condition(method: str, condition_type: Optional[str]) -> None:
    if method not in METHODS:
        raise ConfigError(f"Unknown method '{method}', expected one of {METHODS}")
    if condition_type is not None and condition_type not in CONDITION_TYPES:
        raise ConfigError(f"Unknown condition type '{condition_type}', expected one of {CONDITION_TYPES}")
    if method == "csm" and condition_type is not None:
        raise ConfigError("csm trains on radiographs only; drop --condition")
    if method != "csm" and condition_type is None:
        raise ConfigError(f"{method} needs --condition {{{'|'.join(CONDITION_TYPES)}}}")


class ExperimentOrchestrator:
    """Glue object binding all sub systems together for one run configuration."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.hash = config_hash(config)

    # Paths --------------------------------------------------------------
    @property
    def out_dir(self) -> Path:
        return self.config.out_dir

    def checkpoint_dir(self, method: str, condition_type: Optional[str]) -> Path:
        return self.out_dir / "checkpoints" / checkpoint_key(method, condition_type)

    def checkpoint_path(self, method: str, condition_type: Optional[str]) -> Path:
        return self.checkpoint_dir(method, condition_type) / "best.sdf"

    def _manifest(self) -> DatasetManifest:
        return DatasetManifest.read(resolve_dataset_directory(self.config.dataset_dir, log=logger))

    # Commands -----------------------------------------------------------
    def gen_data(self) -> DatasetManifest:
        cfg = self.config
        write_effective_config(cfg, cfg.dataset_dir)
        manifest = build_dataset(
            cfg.dataset.n_phantoms,
            cfg.geometry,
            cfg.phantom,
            cfg.dataset.split_seed,
            cfg.dataset_dir,
            contour_threshold=cfg.dataset.contour_threshold,
            bone_threshold=cfg.dataset.bone_threshold,
            show_progress=cfg.dataset.show_progress,
        )
        return manifest

    def _training_split(
        self,
        manifest: DatasetManifest,
        split: str,
        model: ScoreModel,
        condition_type: Optional[str],
    ) -> TrainingSplit:
        dtype = next(model.parameters()).dtype
        images, conditions = load_split(manifest, split, condition_type or "contour", dtype=dtype)
        return TrainingSplit(images=images, conditions=conditions if model.conditional else None, split=split)

    def train(
        self,
        method: str,
        condition_type: Optional[str] = None,
        *,
        resume: Optional[Path] = None,
    ) -> TrainReport:
        check_method_condition(method, condition_type)
        cfg = self.config
        manifest = self._manifest()
        out_dir = self.checkpoint_dir(method, condition_type)
        write_effective_config(cfg, out_dir)

        start_epoch, best = 0, float("inf")
        if resume is not None:
            loaded = load_checkpoint(resume)
            if loaded.model.config.method != method:
                raise SamplerMisuseError(
                    f"Checkpoint {resume} holds a {loaded.model.config.method} model, not {method}"
                )
            model = loaded.model
            start_epoch = int(loaded.meta.get("epoch", -1)) + 1
            best = float(loaded.meta.get("val_loss", best))
            if start_epoch >= cfg.train.max_epochs:
                raise ConfigError(
                    f"{resume} already reached epoch {start_epoch - 1}; raise train.max_epochs to continue"
                )
            logger.info("Resuming %s from %s at epoch %d", method, resume, start_epoch)
        else:
            model = build_model(cfg.model_config(method))

        meta = {
            "method": method,
            "condition_type": condition_type or "",
            "config_hash": self.hash,
            "dataset": str(manifest.root),
        }
        return train(
            model,
            self._training_split(manifest, "train", model, condition_type),
            cfg.train,
            val_split=self._training_split(manifest, "val", model, condition_type),
            out_dir=out_dir,
            checkpoint_meta=meta,
            start_epoch=start_epoch,
            best_val_loss=best,
        )

    def load_for_method(self, method: str, checkpoint: Path) -> ScoreModel:
        """Load ``checkpoint`` and check it holds a ``method`` model."""
        if not Path(checkpoint).exists():
            raise MissingCheckpointError(f"Checkpoint '{checkpoint}' does not exist")
        model = load_checkpoint(checkpoint).model
        if model.config.method != method:
            raise SamplerMisuseError(
                f"Checkpoint '{checkpoint}' holds a {model.config.method} model but --method is {method}"
            )
        model.eval()
        return model

    def sample(
        self,
        method: str,
        checkpoint: Path,
        condition_file: Path,
        out_path: Path,
        *,
        trace_path: Optional[Path] = None,
    ) -> Path:
        model = self.load_for_method(method, checkpoint)
        dtype = next(model.parameters()).dtype
        condition = snap_condition(read_pgm(condition_file, dtype))
        sampler_config = replace(self.config.sampler, record_trace=trace_path is not None)
        result = sample(method, model, condition, sampler_config)

        out_path = Path(out_path)
        write_effective_config(self.config, out_path.parent)
        write_pgm(out_path, result.image)
        if trace_path is not None and result.trace is not None:
            result.trace.write(trace_path)
        logger.info("Wrote %s sample to %s", method, out_path)
        return out_path

    def _collect_models(
        self,
        methods: Sequence[str],
        condition_types: Sequence[str],
    ) -> Dict[Tuple[str, str], ScoreModel]:
        wanted: List[Tuple[str, str, Path]] = []
        for method in methods:
            for condition_type in condition_types:
                key_condition = None if method == "csm" else condition_type
                wanted.append((method, condition_type, self.checkpoint_path(method, key_condition)))

        missing = sorted({str(path) for _, _, path in wanted if not path.exists()})
        if missing:
            raise MissingCheckpointError("Missing checkpoints: " + ", ".join(missing))

        cache: Dict[Path, ScoreModel] = {}
        models: Dict[Tuple[str, str], ScoreModel] = {}
        for method, condition_type, path in wanted:
            if path not in cache:
                cache[path] = self.load_for_method(method, path)
            models[(method, condition_type)] = cache[path]
        return models

    def evaluate(
        self,
        methods: Optional[Sequence[str]] = None,
        condition_types: Optional[Sequence[str]] = None,
        *,
        report_dir: Optional[Path] = None,
    ) -> EvalReport:
        cfg = self.config
        eval_config = replace(
            cfg.eval,
            methods=tuple(methods or cfg.eval.methods),
            condition_types=tuple(condition_types or cfg.eval.condition_types),
        )
        manifest = self._manifest()
        models = self._collect_models(eval_config.methods, eval_config.condition_types)
        report_dir = Path(report_dir) if report_dir is not None else self.out_dir / "eval"
        write_effective_config(cfg, report_dir)

        report = evaluate_methods(
            models,
            manifest,
            eval_config,
            cfg.sampler,
            header={
                "config_hash": self.hash,
                "run_seed": str(cfg.run.seed),
                "split_seed": str(cfg.dataset.split_seed),
                "train_seed": str(cfg.train.seed),
            },
            sample_dir=report_dir / "samples",
        )
        report.write(report_dir)
        return report

    def gallery(self, condition_type: str, count: int = 4, out_path: Optional[Path] = None) -> Path:
        """Montage of the first ``count`` test views: condition | U-Net | CSM | CTM | label."""
        if condition_type not in CONDITION_TYPES:
            raise ConfigError(f"Unknown condition type '{condition_type}', expected one of {CONDITION_TYPES}")
        if count < 1:
            raise ConfigError("gallery needs count >= 1")
        manifest = self._manifest()
        models = self._collect_models(("unet", "csm", "ctm"), (condition_type,))
        records = manifest.split("test")[:count]

        rows = []
        for index, record in enumerate(records):
            label, condition = load_pair(manifest, record, condition_type, torch.float32)
            sampler_config = replace(self.config.sampler, seed=self.config.sampler.seed + index)
            columns = [condition]
            for method in ("unet", "csm", "ctm"):
                model = models[(method, condition_type)]
                y = condition.to(next(model.parameters()).dtype)
                columns.append(sample(method, model, y, sampler_config).image.to(label.dtype))
            columns.append(label)
            rows.append(_hstack(columns))
        montage = _vstack(rows)

        out_path = Path(out_path) if out_path is not None else self.out_dir / f"gallery_{condition_type}.pgm"
        write_effective_config(self.config, out_path.parent)
        write_pgm(out_path, montage)
        logger.info("Wrote %d-row gallery (%s) to %s", len(rows), " | ".join(GALLERY_COLUMNS), out_path)
        return out_path


_GAP = 2


def _hstack(images: Sequence[torch.Tensor]) -> torch.Tensor:
    height = images[0].shape[-2]
    gap = torch.ones(1, height, _GAP, dtype=images[0].dtype)
    parts: List[torch.Tensor] = []
    for i, image in enumerate(images):
        if i:
            parts.append(gap)
        parts.append(image)
    return torch.cat(parts, dim=-1)


def _vstack(rows: Sequence[torch.Tensor]) -> torch.Tensor:
    width = rows[0].shape[-1]
    gap = torch.ones(1, _GAP, width, dtype=rows[0].dtype)
    parts: List[torch.Tensor] = []
    for i, row in enumerate(rows):
        if i:
            parts.append(gap)
        parts.append(row)
    return torch.cat(parts, dim=-2)
