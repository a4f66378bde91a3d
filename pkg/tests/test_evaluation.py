from __future__ import annotations

import dataclasses

import pytest

from sketchseg.core.errors import EvaluationError
from sketchseg.models.domain import DatasetSplit
from sketchseg.models.schemas import MetricsReport
from sketchseg.services import evaluation


def _oracle_segmenter(split):
    masks = {id(item.bitmap): item.mask for item in split.items}
    return lambda bitmap, categories, model: masks[id(bitmap)]


def test_ground_truth_prediction_scores_perfectly(tiny_model, tiny_split, monkeypatch):
    monkeypatch.setattr(evaluation, "segment", _oracle_segmenter(tiny_split))
    report = evaluation.evaluate_split(tiny_model, tiny_split)
    assert (report.acc_pixel, report.miou, report.mean_acc, report.fwiou) == (1.0, 1.0, 1.0, 1.0)
    assert report.acc_stroke == 1.0
    assert report.n_items == len(tiny_split)
    assert report.items is None
    # every category is recalled perfectly, so the correlation has zero variance
    assert report.acc_frequency_corr is None


def test_seen_and_unseen_accuracy(tiny_model, tiny_split, monkeypatch):
    monkeypatch.setattr(evaluation, "segment", _oracle_segmenter(tiny_split))
    report = evaluation.evaluate_split(tiny_model, tiny_split)
    present = set(report.per_category)
    seen = present & set(tiny_model.vocabulary)
    assert (report.acc_pixel_seen is not None) == bool(seen)
    assert (report.acc_pixel_unseen is not None) == bool(present - seen)


def test_per_item_rows(tiny_model, tiny_split):
    report = evaluation.evaluate_split(tiny_model, tiny_split, per_item=True)
    assert [row.sketch_id for row in report.items] == [it.sketch_id for it in tiny_split.items]
    assert all(0.0 <= row.acc_pixel <= 1.0 for row in report.items)
    assert MetricsReport.model_validate_json(report.model_dump_json()) == report


def test_split_without_masks_is_rejected(tiny_model, tiny_split):
    bare = DatasetSplit(
        role="val",
        items=[dataclasses.replace(item, mask=None) for item in tiny_split.items],
        vocabulary=tiny_split.vocabulary,
    )
    with pytest.raises(EvaluationError):
        evaluation.evaluate_split(tiny_model, bare)
    with pytest.raises(EvaluationError):
        evaluation.evaluate_split(tiny_model, DatasetSplit(role="test"))
