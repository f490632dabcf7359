"""Image-quality metrics and test-split evaluation."""

from .evaluation import EvalConfig, EvalReport, EvalRow, ImageScore, evaluate_methods, evaluate_split
from .image_quality import PSNR_CAP_DB, capped_psnr, dice, mae, psnr

__all__ = [
    "EvalConfig",
    "EvalReport",
    "EvalRow",
    "ImageScore",
    "PSNR_CAP_DB",
    "capped_psnr",
    "dice",
    "evaluate_methods",
    "evaluate_split",
    "mae",
    "psnr",
]
