#!/usr/bin/env python3
"""Check the desk-scale method ordering on an evaluated run.

Usage:
    python scripts/acceptance_check.py --config config/default_config.json
    python scripts/acceptance_check.py --report runs/desk/eval --evaluate

Expects a run where CSM and the CTM / U-Net models for both condition types are
trained. Reads ``eval_report.tsv`` (or writes it first with ``--evaluate``) and
checks that CTM has the lowest MAE, that CSM scores a lower PSNR than the U-Net,
that CSM keeps its contour and that the contour+bone condition helps CTM.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from app import exit_code_for
from Metrics.evaluation import REPORT_NAME, EvalReport, ordering_failures
from Utils.config import ConfigError, load_run_config
from Utils.orchestrator import ExperimentOrchestrator

logger = logging.getLogger("acceptance_check")


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="config/default_config.json", help="Run profile of the trained models")
    parser.add_argument("--report", type=Path, default=None, help="Report directory (default: <out_dir>/eval)")
    parser.add_argument("--evaluate", action="store_true", help="Run the test-split evaluation first")
    parser.add_argument("--dice-floor", type=float, default=0.9, help="Minimum CSM contour Dice")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"],
        help="Logging verbosity",
    )
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    logging.basicConfig(level=getattr(logging, args.log_level))

    try:
        config = load_run_config(args.config)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        raise SystemExit(2)

    report_dir = args.report or config.out_dir / "eval"
    if args.evaluate:
        try:
            report = ExperimentOrchestrator(config).evaluate(report_dir=report_dir)
        except Exception as exc:  # noqa: BLE001
            code = exit_code_for(exc)
            if code is None:
                raise
            print(f"Error: {exc}", file=sys.stderr)
            raise SystemExit(code)
    elif (report_dir / REPORT_NAME).exists():
        report = EvalReport.read(report_dir)
    else:
        print(f"Error: {report_dir / REPORT_NAME} not found; rerun with --evaluate", file=sys.stderr)
        raise SystemExit(3)

    for row in report.rows:
        print(
            f"{row.method:>5} {row.condition_type:<13} MAE {row.mae_mean:.5f} ± {row.mae_std:.5f}  "
            f"PSNR {row.psnr_mean_db:.3f} ± {row.psnr_std_db:.3f} dB  Dice {row.contour_dice_mean:.4f}"
        )

    failures = ordering_failures(report, dice_floor=args.dice_floor)
    if failures:
        for failure in failures:
            print(f"Error: {failure}", file=sys.stderr)
        raise SystemExit(1)
    print("All orderings hold.")


if __name__ == "__main__":
    main()
