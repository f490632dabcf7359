"""Score matching and L1 training."""

from .losses import NonFiniteLossError, dsm_loss, l1_loss, method_loss
from .trainer import TrainConfig, TrainingSplit, TrainReport, evaluate_loss, train

__all__ = [
    "NonFiniteLossError",
    "TrainConfig",
    "TrainReport",
    "TrainingSplit",
    "dsm_loss",
    "evaluate_loss",
    "l1_loss",
    "method_loss",
    "train",
]
