"""Per-image quality measures: MAE, PSNR and Dice overlap."""
from __future__ import annotations

import math

import torch

from SDE.ve_sde import ShapeMismatchError

PSNR_CAP_DB = 99.0


def _check_pair(pred: torch.Tensor, label: torch.Tensor) -> None:
    if pred.shape != label.shape:
        raise ShapeMismatchError(f"prediction {tuple(pred.shape)} and label {tuple(label.shape)} differ")


def mae(pred: torch.Tensor, label: torch.Tensor) -> float:
    """Mean absolute error over all pixels."""
    _check_pair(pred, label)
    return float((pred.double() - label.double()).abs().mean())


def mse(pred: torch.Tensor, label: torch.Tensor) -> float:
    _check_pair(pred, label)
    return float((pred.double() - label.double()).pow(2).mean())


def psnr(pred: torch.Tensor, label: torch.Tensor, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; ``inf`` for identical images."""
    if not peak > 0.0:
        raise ValueError(f"peak must be positive, got {peak}")
    error = mse(pred, label)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / error)


def capped_psnr(value: float, cap: float = PSNR_CAP_DB) -> tuple[float, bool]:
    """Report value and whether it was capped."""
    if value > cap:
        return cap, True
    return value, False


def dice(a: torch.Tensor, b: torch.Tensor, threshold: float = 0.0) -> float:
    """Overlap ``2|A & B| / (|A| + |B|)`` of the supports ``> threshold``; 1 when both are empty."""
    _check_pair(a, b)
    mask_a = a > threshold
    mask_b = b > threshold
    total = int(mask_a.sum()) + int(mask_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((mask_a & mask_b).sum()) / total
