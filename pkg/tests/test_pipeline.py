from __future__ import annotations

from pathlib import Path

import pytest

from sketchseg.core.errors import ContractError
from sketchseg.services.checkpoint import load_checkpoint
from sketchseg.vision.pipeline import Trainer, epoch_batches, epoch_checkpoint_path, read_training_log


def test_epoch_batches_cover_every_item_once():
    batches = epoch_batches(10, 4, seed=0, epoch=1)
    assert sorted(i for b in batches for i in b) == list(range(10))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert epoch_batches(10, 4, seed=0, epoch=1) == batches
    assert epoch_batches(10, 4, seed=0, epoch=2) != batches


def test_trailing_single_item_joins_the_previous_batch():
    assert [len(b) for b in epoch_batches(9, 4, seed=0, epoch=1)] == [4, 5]
    with pytest.raises(ContractError):
        epoch_batches(1, 4, seed=0, epoch=1)


def test_epoch_checkpoint_path():
    assert epoch_checkpoint_path(Path("runs/model.ckpt"), 2) == Path("runs/model.epoch002.ckpt")


def test_fit_logs_each_step_and_keeps_the_best_epoch(tmp_path, tiny_model, tiny_split, synth_config):
    from sketchseg.services.sketch_data import generate_synthetic

    val = generate_synthetic(synth_config, seed=9, n_items=2, role="val")
    out = tmp_path / "model.ckpt"
    run = Trainer(tiny_model, out, show_progress=False).fit(tiny_split, val)
    assert run.selected_by == "val_miou"
    assert [e.epoch for e in run.epochs] == [1, 2]
    assert run.step == 4
    records = read_training_log(out.with_suffix(".log.jsonl"))
    assert [r["step"] for r in records] == [1, 2, 3, 4]
    assert set(records[0]) >= {"step", "loss_global", "loss_category", "tau", "lr"}
    best = epoch_checkpoint_path(out, run.best_epoch)
    assert out.read_bytes() == best.read_bytes()


def test_fit_without_validation_keeps_the_last_epoch(tmp_path, tiny_model, tiny_split):
    out = tmp_path / "model.ckpt"
    run = Trainer(tiny_model, out, show_progress=False).fit(tiny_split)
    assert (run.selected_by, run.best_epoch) == ("last", 2)
    assert load_checkpoint(out).step == 4


def test_fit_checkpoints_every_n_epochs_and_after_the_last(tmp_path, tiny_model, tiny_split, synth_config):
    from sketchseg.services.sketch_data import generate_synthetic

    tiny_model.training = tiny_model.training.model_copy(update={"epochs": 3, "checkpoint_every": 2})
    val = generate_synthetic(synth_config, seed=9, n_items=2, role="val")
    out = tmp_path / "model.ckpt"
    run = Trainer(tiny_model, out, show_progress=False).fit(tiny_split, val)
    assert [e.epoch for e in run.epochs] == [1, 2, 3]
    assert [e.val_miou is not None for e in run.epochs] == [False, True, True]
    assert not epoch_checkpoint_path(out, 1).exists()
    assert epoch_checkpoint_path(out, 2).exists() and epoch_checkpoint_path(out, 3).exists()
    assert run.best_epoch in (2, 3)
    assert len(read_training_log(out.with_suffix(".log.jsonl"))) == 6
