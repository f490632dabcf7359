"""Adam training loop shared by the score models and the U-Net baseline."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import torch
from tqdm import tqdm

from SDE.ve_sde import SigmaSchedule
from ScoreNet.checkpoint import save_model
from ScoreNet.model import ScoreModel
from Training.losses import WEIGHTINGS, NonFiniteLossError, method_loss

logger = logging.getLogger(__name__)

TRAIN_LOG_NAME = "train_log.tsv"
TRAINER_STATE_NAME = "trainer_state.pt"


@dataclass
class TrainConfig:
    """Optimiser and schedule options for :func:`train`."""

    batch_size: int = 16
    learning_rate: float = 2e-4
    max_epochs: int = 300
    t_eps: float = 1e-5
    loss_weighting: str = "sigma_squared"
    seed: int = 0
    checkpoint_every: int = 10
    max_steps: Optional[int] = None
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    show_progress: bool = True

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.t_eps < 1.0:
            raise ValueError(f"t_eps must lie in (0, 1), got {self.t_eps}")
        if self.loss_weighting not in WEIGHTINGS:
            raise ValueError(f"loss_weighting must be one of {WEIGHTINGS}, got '{self.loss_weighting}'")
        if self.max_epochs < 1 or self.checkpoint_every < 1:
            raise ValueError("max_epochs and checkpoint_every must be >= 1")


@dataclass
class TrainingSplit:
    """Tensors of one dataset split; ``conditions`` may be ``None`` for toy data."""

    images: torch.Tensor
    conditions: Optional[torch.Tensor] = None
    split: str = "train"

    def __post_init__(self) -> None:
        if self.images.shape[0] == 0:
            raise ValueError(f"Split '{self.split}' is empty")
        if self.conditions is not None and self.conditions.shape != self.images.shape:
            raise ValueError("conditions must match the image tensor shape")

    def __len__(self) -> int:
        return int(self.images.shape[0])


@dataclass
class TrainReport:
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    checkpoint_paths: List[Path] = field(default_factory=list)
    best_val_loss: float = math.inf
    best_epoch: int = -1
    steps: int = 0


def _batches(split: TrainingSplit, batch_size: int, order: torch.Tensor):
    for start in range(0, len(split), batch_size):
        index = order[start : start + batch_size]
        conditions = split.conditions[index] if split.conditions is not None else None
        yield split.images[index], conditions


def _save_trainer_state(path: Path, epoch: int, optimizer: torch.optim.Optimizer, generator: torch.Generator) -> None:
    torch.save({"epoch": epoch, "optimizer": optimizer.state_dict(), "generator": generator.get_state()}, path)


def _restore_trainer_state(
    path: Path,
    start_epoch: int,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
) -> bool:
    """Load the Adam moments and data-order stream saved after epoch ``start_epoch - 1``."""
    if not path.exists():
        logger.warning("No %s in %s; resuming with fresh Adam moments", TRAINER_STATE_NAME, path.parent)
        return False
    state = torch.load(path, weights_only=True)
    if int(state["epoch"]) != start_epoch - 1:
        logger.warning(
            "%s belongs to epoch %d, not %d; resuming with fresh Adam moments",
            path,
            int(state["epoch"]),
            start_epoch - 1,
        )
        return False
    optimizer.load_state_dict(state["optimizer"])
    generator.set_state(state["generator"])
    logger.info("Restored optimiser state from %s", path)
    return True


def evaluate_loss(
    model: ScoreModel,
    split: TrainingSplit,
    schedule: SigmaSchedule,
    config: TrainConfig,
    *,
    seed: Optional[int] = None,
) -> float:
    """Sample-weighted mean loss over ``split`` with a fixed random stream."""
    generator = torch.Generator().manual_seed(int(config.seed + 1 if seed is None else seed))
    order = torch.arange(len(split))
    total = 0.0
    with torch.no_grad():
        for images, conditions in _batches(split, config.batch_size, order):
            result = method_loss(
                model,
                images,
                conditions,
                schedule,
                generator,
                t_eps=config.t_eps,
                weighting=config.loss_weighting,
            )
            total += float(result.per_sample.sum())
    return total / len(split)


def train(
    model: ScoreModel,
    train_split: TrainingSplit,
    config: TrainConfig,
    *,
    val_split: Optional[TrainingSplit] = None,
    out_dir: Optional[Path] = None,
    checkpoint_meta: Optional[dict] = None,
    start_epoch: int = 0,
    best_val_loss: float = math.inf,
) -> TrainReport:
    """Fit ``model`` with Adam; deterministic given ``config.seed``.

    A resumed run passes the weights it continues from in ``model`` and the
    first epoch number in ``start_epoch`` (plus the validation loss of its
    ``best.sdf`` in ``best_val_loss``); epochs run up to ``max_epochs`` and
    the existing log is appended to. When ``out_dir`` holds the
    ``trainer_state.pt`` written after epoch ``start_epoch - 1`` the Adam
    moments and the data-order stream are restored, so resuming from
    ``last.sdf`` reproduces the uninterrupted run. Without it (or from an
    older ``best.sdf``) Adam starts fresh and the stream is reseeded with
    ``seed + start_epoch``, and the trajectory diverges from the
    uninterrupted one.

    Writes ``train_log.tsv`` and checkpoints (``epoch_XXXX.sdf`` at the configured
    cadence, ``best.sdf`` at the best validation loss, ``last.sdf`` every epoch) when
    ``out_dir`` is given.
    """
    config.validate()
    for split in (train_split, val_split):
        if split is not None and split.split == "test":
            raise ValueError("Training must never read the test split")

    schedule = model.schedule
    if not 0 <= start_epoch < config.max_epochs:
        raise ValueError(f"start_epoch must lie in [0, {config.max_epochs}), got {start_epoch}")

    generator = torch.Generator().manual_seed(int(config.seed) + start_epoch)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=config.betas,
        eps=config.adam_eps,
    )
    report = TrainReport(best_val_loss=best_val_loss)
    meta = dict(checkpoint_meta or {})

    log_path: Optional[Path] = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / TRAIN_LOG_NAME
        if start_epoch == 0 or not log_path.exists():
            log_path.write_text("epoch\ttrain_loss\tval_loss\tseconds\n", encoding="utf-8")
        if start_epoch > 0:
            _restore_trainer_state(out_dir / TRAINER_STATE_NAME, start_epoch, optimizer, generator)

    for epoch in range(start_epoch, config.max_epochs):
        started = time.perf_counter()
        model.train()
        order = torch.randperm(len(train_split), generator=generator)
        total, seen = 0.0, 0
        batches = _batches(train_split, config.batch_size, order)
        for images, conditions in tqdm(batches, desc=f"epoch {epoch}", disable=not config.show_progress, leave=False):
            result = method_loss(
                model,
                images,
                conditions,
                schedule,
                generator,
                t_eps=config.t_eps,
                weighting=config.loss_weighting,
            )
            optimizer.zero_grad(set_to_none=True)
            result.loss.backward()
            optimizer.step()

            total += float(result.per_sample.detach().sum())
            seen += images.shape[0]
            report.steps += 1
            if config.max_steps is not None and report.steps >= config.max_steps:
                break

        model.eval()
        train_loss = total / max(seen, 1)
        val_loss = evaluate_loss(model, val_split, schedule, config) if val_split is not None else train_loss
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise NonFiniteLossError(
                f"Epoch {epoch} produced a non-finite loss (train={train_loss}, val={val_loss}); "
                "last good checkpoint retained"
            )
        elapsed = time.perf_counter() - started

        report.train_losses.append(train_loss)
        report.val_losses.append(val_loss)
        report.seconds.append(elapsed)
        logger.info("epoch %d: train_loss=%.6f val_loss=%.6f (%.1fs)", epoch, train_loss, val_loss, elapsed)

        if out_dir is not None:
            assert log_path is not None
            with log_path.open("a", encoding="utf-8") as handle:
                handle.write(f"{epoch}\t{train_loss:.9g}\t{val_loss:.9g}\t{elapsed:.3f}\n")
            epoch_meta = {**meta, "epoch": epoch, "val_loss": val_loss, "seed": config.seed}
            if val_loss < report.best_val_loss:
                report.checkpoint_paths.append(save_model(model, out_dir / "best.sdf", epoch_meta))
            if (epoch + 1) % config.checkpoint_every == 0:
                report.checkpoint_paths.append(save_model(model, out_dir / f"epoch_{epoch:04d}.sdf", epoch_meta))
            save_model(model, out_dir / "last.sdf", epoch_meta)
            _save_trainer_state(out_dir / TRAINER_STATE_NAME, epoch, optimizer, generator)

        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch

        if config.max_steps is not None and report.steps >= config.max_steps:
            logger.info("Reached max_steps=%d", config.max_steps)
            break

    if out_dir is not None:
        report.checkpoint_paths.append(out_dir / "last.sdf")
    return report
