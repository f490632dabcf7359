#!/usr/bin/env python3
"""Smoketest utility for the predictor-corrector samplers.

Usage:
    python scripts/sampling_smoketest.py --mean 0.5 --std 0.2 --snr 0.05 --trace trace.tsv

Runs the unconditional reverse diffusion from the prior with the exact score of
``N(mean, std^2)`` data on 10^4 independent pixels, then checks the empirical
mean and standard deviation of the result against the target distribution.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import torch

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from Sampling.samplers import GaussianScore, SamplerConfig, sample_unconditional
from SDE.ve_sde import SigmaSchedule

logger = logging.getLogger("sampling_smoketest")


class OracleMismatchError(RuntimeError):
    """Raised when sampled statistics miss the analytic target."""


def run_oracle(args: argparse.Namespace) -> tuple[float, float]:
    schedule = SigmaSchedule()
    score = GaussianScore(schedule, mean=args.mean, std=args.std)
    config = SamplerConfig(
        n_steps=args.steps,
        snr=args.snr,
        corrector_steps=args.corrector_steps,
        clamp_output=False,
        seed=args.seed,
        discretization=args.discretization,
        record_trace=args.trace is not None,
        show_progress=True,
    )
    result = sample_unconditional(score, (1, 1, 100, 100), config, dtype=torch.float64)
    x = result.image
    if result.trace is not None:
        result.trace.write(args.trace)
        logger.info("Trace written to %s", args.trace)
    return float(x.mean()), float(x.std(unbiased=False))


def expected_std(std: float, snr: float, corrector_steps: int) -> float:
    """Stationary std of the corrector on a Gaussian target: ``std * sqrt(1 + snr^2)``."""
    if corrector_steps == 0:
        return std
    return std * math.sqrt(1.0 + snr * snr)


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--mean", type=float, default=0.5, help="Target mean")
    parser.add_argument("--std", type=float, default=0.2, help="Target standard deviation")
    parser.add_argument("--steps", type=int, default=500, help="Predictor steps")
    parser.add_argument("--snr", type=float, default=0.05, help="Corrector signal-to-noise ratio")
    parser.add_argument("--corrector-steps", type=int, default=1)
    parser.add_argument("--discretization", choices=["variance", "literal"], default="variance")
    parser.add_argument("--tolerance", type=float, default=0.05, help="Relative tolerance")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--trace", type=Path, default=None, help="Optional trace TSV")
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

    if args.std <= 0.0 or not 0.0 < args.snr < 1.0:
        print("Error: --std must be positive and --snr must lie in (0, 1).", file=sys.stderr)
        raise SystemExit(1)

    try:
        mean, std = run_oracle(args)
        target_std = expected_std(args.std, args.snr, args.corrector_steps)
        print(f"mean {mean:.5f} (target {args.mean:.5f}), std {std:.5f} (target {target_std:.5f})")
        if abs(mean - args.mean) > args.tolerance * max(abs(args.mean), args.std):
            raise OracleMismatchError(f"mean {mean:.5f} misses {args.mean:.5f}")
        if abs(std - target_std) > args.tolerance * target_std:
            raise OracleMismatchError(f"std {std:.5f} misses {target_std:.5f}")
    except OracleMismatchError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        raise SystemExit(1)


if __name__ == "__main__":
    main()
