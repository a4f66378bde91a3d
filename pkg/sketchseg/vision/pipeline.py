from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from sketchseg.core.errors import ContractError
from sketchseg.models.domain import DatasetSplit
from sketchseg.services.checkpoint import save_checkpoint
from sketchseg.services.evaluation import evaluate_split
from sketchseg.vision.model import SketchSegmenter
from sketchseg.vision.training import LossBreakdown, TrainItem, train_step

logger = logging.getLogger("sketchseg.pipeline")


def epoch_batches(n_items: int, batch_size: int, seed: int, epoch: int) -> List[List[int]]:
    """Seeded shuffle per epoch, then fixed-size chunks; a trailing single item joins the previous batch."""
    if n_items < 2:
        raise ContractError(f"training needs at least 2 items, got {n_items}")
    order = np.random.default_rng([seed, epoch]).permutation(n_items).tolist()
    batches = [order[i:i + batch_size] for i in range(0, n_items, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def epoch_checkpoint_path(out: Path, epoch: int) -> Path:
    return out.with_name(f"{out.stem}.epoch{epoch:03d}{out.suffix}")


@dataclass
class EpochSummary:
    epoch: int
    mean_loss: float
    tau: float
    val_miou: Optional[float] = None
    checkpoint: Optional[Path] = None


@dataclass
class TrainingRun:
    epochs: List[EpochSummary] = field(default_factory=list)
    best_epoch: Optional[int] = None
    selected_by: str = "last"
    step: int = 0


class Trainer:
    """Epoch loop around `train_step`.

    1. Shuffle and batch the training split (seeded).
    2. One optimizer step per batch; each step appended to the JSONL log.
    3. Every `checkpoint_every` epochs (and after the last) write a checkpoint and score the validation split.
    4. Copy the best epoch by validation mIoU (or the last one) to `out`.
    """

    def __init__(
        self,
        model: SketchSegmenter,
        out: str | Path,
        log_path: Optional[str | Path] = None,
        show_progress: bool = True,
    ) -> None:
        self.model = model
        self.out = Path(out)
        self.log_path = Path(log_path) if log_path else self.out.with_suffix(".log.jsonl")
        self.show_progress = show_progress

    def _items(self, split: DatasetSplit) -> List[TrainItem]:
        return [TrainItem.from_dataset_item(item, self.model.text) for item in split.items]

    def _log(self, records: Sequence[str]) -> None:
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with self.log_path.open("a", encoding="utf-8") as f:
            for line in records:
                f.write(line + "\n")

    def run_epoch(self, items: Sequence[TrainItem], epoch: int) -> List[LossBreakdown]:
        model = self.model
        cfg = model.training
        batches = epoch_batches(len(items), cfg.batch_size, model.seed, epoch)
        losses: List[LossBreakdown] = []
        lines: List[str] = []
        bar = tqdm(batches, desc=f"Epoch {epoch}/{cfg.epochs}", disable=not self.show_progress, leave=False)
        for batch in bar:
            model.state, breakdown = train_step(model.state, [items[i] for i in batch], model.encoder, cfg)
            losses.append(breakdown)
            lines.append(breakdown.log_record(model.step, cfg.learning_rate).model_dump_json())
            bar.set_postfix(loss=f"{breakdown.total:.4f}", tau=f"{breakdown.tau:.3f}")
        self._log(lines)
        return losses

    def fit(self, train: DatasetSplit, val: Optional[DatasetSplit] = None) -> TrainingRun:
        model = self.model
        items = self._items(train)
        if not model.vocabulary:
            model.vocabulary = tuple(train.vocabulary)
        use_val = val is not None and len(val) > 0 and val.has_masks
        run = TrainingRun(selected_by="val_miou" if use_val else "last")
        best_score = -1.0
        steps_per_epoch = len(epoch_batches(len(items), model.training.batch_size, model.seed, 1))
        first_epoch = model.step // steps_per_epoch + 1

        for epoch in range(first_epoch, model.training.epochs + 1):
            losses = self.run_epoch(items, epoch)
            summary = EpochSummary(
                epoch=epoch,
                mean_loss=float(np.mean([b.total for b in losses])),
                tau=model.tau,
            )
            # validation runs only on epochs that leave a checkpoint behind
            if epoch % model.training.checkpoint_every == 0 or epoch == model.training.epochs:
                summary.checkpoint = save_checkpoint(model, epoch_checkpoint_path(self.out, epoch))
                if use_val:
                    summary.val_miou = evaluate_split(model, val).miou
                    if summary.val_miou > best_score:
                        best_score = summary.val_miou
                        run.best_epoch = epoch
                else:
                    run.best_epoch = epoch
            run.epochs.append(summary)
            logger.info(
                "Epoch finished",
                extra={"event": "epoch_finished", "epoch": epoch, "loss": summary.mean_loss,
                       "tau": summary.tau, "val_miou": summary.val_miou},
            )

        run.step = model.step
        if run.best_epoch is not None:
            shutil.copyfile(epoch_checkpoint_path(self.out, run.best_epoch), self.out)
        else:
            save_checkpoint(model, self.out)
        logger.info(
            "Training finished",
            extra={"event": "training_finished", "best_epoch": run.best_epoch,
                   "selected_by": run.selected_by, "step": run.step},
        )
        return run


def read_training_log(path: str | Path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


__all__ = ["EpochSummary", "Trainer", "TrainingRun", "epoch_batches", "epoch_checkpoint_path", "read_training_log"]
