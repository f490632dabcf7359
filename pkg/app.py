"""Entry point for the segmentation-to-radiograph diffusion toolkit.

Usage:
    python app.py gen-data --config config/default_config.json
    python app.py train --method ctm --condition contour_bone
    python app.py sample --method csm --checkpoint runs/desk/checkpoints/csm/best.sdf \\
        --condition-file data/desk/images/p000_v000_contour.pgm --out sample.pgm
    python app.py eval --methods unet csm ctm
    python app.py gallery --condition contour

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from Phantom.dataset import CONDITION_TYPES
from Phantom.dataset_utils import DatasetIncompleteError
from Phantom.pgm import PGMFormatError
from Phantom.projector import GeometryMismatchError
from Phantom.segmentation import DegenerateInputError
from Phantom.volume import PhantomParameterError
from Sampling.samplers import SamplerMisuseError
from SDE.ve_sde import ScheduleDomainError, ShapeMismatchError
from ScoreNet.checkpoint import CheckpointFormatError
from ScoreNet.model import ModelConfigError
from Training.losses import NonFiniteLossError
from Utils.config import ConfigError, load_run_config
from Utils.orchestrator import METHODS, ExperimentOrchestrator

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path("config/default_config.json")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_EXIT_CODES = (
    ((ConfigError, SamplerMisuseError, ModelConfigError), EXIT_USAGE),
    (
        (
            DatasetIncompleteError,
            CheckpointFormatError,
            PGMFormatError,
            PhantomParameterError,
            GeometryMismatchError,
            DegenerateInputError,
            ShapeMismatchError,
            OSError,
        ),
        EXIT_DATA,
    ),
    ((NonFiniteLossError, ScheduleDomainError), EXIT_NUMERIC),
)


def exit_code_for(exc: BaseException) -> Optional[int]:
    for types, code in _EXIT_CODES:
        if isinstance(exc, types):
            return code
    return None


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        type=Path,
        default=DEFAULT_CONFIG,
        help=f"Run profile, JSON or dotted 'section.key = value' text (default: {DEFAULT_CONFIG})",
    )
    parser.add_argument("--seed", type=int, default=None, help="Seed pushed into every stochastic module")
    parser.add_argument("--out", type=Path, default=None, help="Output location")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value (repeatable)",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"],
        help="Logging verbosity",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Score-based radiograph generation from segmentations")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate phantoms, radiographs and conditions")
    _add_common(gen)

    trn = commands.add_parser("train", help="Train a CSM, CTM or U-Net model")
    _add_common(trn)
    trn.add_argument("--method", required=True, choices=METHODS)
    trn.add_argument("--condition", choices=CONDITION_TYPES, default=None)
    trn.add_argument("--resume", type=Path, default=None, help="Checkpoint to continue training from")

    smp = commands.add_parser("sample", help="Generate one radiograph from a condition image")
    _add_common(smp)
    smp.add_argument("--method", required=True, choices=METHODS)
    smp.add_argument("--checkpoint", required=True, type=Path)
    smp.add_argument("--condition-file", required=True, type=Path)
    smp.add_argument("--trace", type=Path, default=None, help="Optional per-step trace (TSV)")

    evl = commands.add_parser("eval", help="Evaluate methods over the test split")
    _add_common(evl)
    evl.add_argument("--methods", nargs="+", choices=METHODS, default=None)
    evl.add_argument("--conditions", nargs="+", choices=CONDITION_TYPES, default=None)

    gal = commands.add_parser("gallery", help="Write a comparison montage of test views")
    _add_common(gal)
    gal.add_argument("--condition", choices=CONDITION_TYPES, default="contour")
    gal.add_argument("--count", type=int, default=4)
    return parser


def run(args: argparse.Namespace) -> int:
    config_path = args.config if args.config is not None and args.config.exists() else None
    if args.config is not None and config_path is None and args.config != DEFAULT_CONFIG:
        raise ConfigError(f"Config file '{args.config}' does not exist")

    out_override = None if args.command in ("gen-data", "sample") else args.out
    overrides = list(args.overrides)
    if args.command == "gen-data" and args.out is not None:
        overrides.append(f"dataset.directory={json.dumps(str(args.out))}")
    config = load_run_config(config_path, overrides=overrides, seed=args.seed, out_dir=out_override)
    orchestrator = ExperimentOrchestrator(config)

    if args.command == "gen-data":
        manifest = orchestrator.gen_data()
        counts = manifest.counts()
        print(
            f"Wrote {len(manifest.records)} images to {manifest.root}: "
            + ", ".join(f"{name}={count}" for name, count in counts.items())
        )
    elif args.command == "train":
        report = orchestrator.train(args.method, args.condition, resume=args.resume)
        print(f"Best validation loss {report.best_val_loss:.6g} at epoch {report.best_epoch}")
    elif args.command == "sample":
        if args.out is None:
            raise ConfigError("sample needs --out for the generated PGM")
        path = orchestrator.sample(
            args.method, args.checkpoint, args.condition_file, args.out, trace_path=args.trace
        )
        print(f"Wrote {path}")
    elif args.command == "eval":
        report = orchestrator.evaluate(args.methods, args.conditions)
        for row in report.rows:
            print(
                f"{row.method:5s} {row.condition_type:12s} MAE {row.mae_mean:.4f} ± {row.mae_std:.4f}  "
                f"PSNR {row.psnr_mean_db:.2f} ± {row.psnr_std_db:.2f} dB  (n={row.n_images})"
            )
    elif args.command == "gallery":
        path = orchestrator.gallery(args.condition, args.count)
        print(f"Wrote {path}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level))

    try:
        return run(args)
    except Exception as exc:  # noqa: BLE001
        code = exit_code_for(exc)
        if code is None:
            raise
        print(f"Error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    raise SystemExit(main())
