from __future__ import annotations

import numpy as np
import pytest
from sklearn.metrics import confusion_matrix

from sketchseg.core.errors import DimensionError, EvaluationError
from sketchseg.models.domain import SegmentationMask
from sketchseg.services import metrics

AB = ("A", "B")


def _row(labels, categories=AB):
    return SegmentationMask(np.array([labels], dtype=np.int32), categories)


def test_pixel_accuracy_worked_example():
    gt, pred = _row([1, 1, 2, 2]), _row([1, 2, 2, 2])
    assert metrics.acc_pixel(pred, gt) == pytest.approx(0.75)


def test_miou_worked_example():
    value, per_category = metrics.miou(_row([1, 2, 2, 2]), _row([1, 1, 2, 2]))
    assert per_category == pytest.approx({"A": 1 / 2, "B": 2 / 3})
    assert value == pytest.approx(7 / 12)


def test_mean_acc_worked_example():
    assert metrics.mean_acc(_row([1, 1, 2, 2]), _row([1, 1, 1, 2])) == pytest.approx(5 / 6)


def test_perfect_prediction_scores_one():
    gt = _row([1, 2, 0, 2])
    scores = metrics.confusion(gt, gt).scores()
    assert (scores.acc_pixel, scores.miou, scores.mean_acc, scores.fwiou) == (1.0, 1.0, 1.0, 1.0)


def test_unlabeled_gt_pixels_are_not_counted():
    gt, pred = _row([0, 0, 1, 2]), _row([1, 2, 1, 2])
    assert metrics.confusion(pred, gt).scores().total == 2
    assert metrics.acc_pixel(pred, gt) == 1.0
    # background predicted on ink is a miss
    assert metrics.acc_pixel(_row([0, 0, 0, 2]), gt) == 0.5


def test_category_only_predicted_gets_zero_iou():
    gt = _row([1, 1, 1, 1], ("A", "B", "C"))
    pred = _row([1, 1, 3, 3], ("A", "B", "C"))
    value, per_category = metrics.miou(pred, gt)
    assert per_category == pytest.approx({"A": 0.5, "C": 0.0})
    assert value == pytest.approx(0.25)
    assert metrics.mean_acc(pred, gt) == pytest.approx(0.5)


def test_masks_with_different_vocabularies_are_aligned_by_name():
    gt = _row([1, 2], ("cat", "tree"))
    pred = _row([2, 1], ("tree", "cat"))
    assert metrics.acc_pixel(pred, gt) == 1.0


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        metrics.confusion(_row([1, 1]), _row([1, 1, 1]))


def test_no_ink_is_an_evaluation_error():
    with pytest.raises(EvaluationError):
        metrics.acc_pixel(_row([1, 2]), _row([0, 0]))


def _brute_force(pred, gt, n):
    ink = gt > 0
    total = ink.sum()
    acc = float((pred[ink] == gt[ink]).sum()) / total
    ious, recalls, freqs = {}, {}, {}
    for c in range(1, n + 1):
        inter = np.sum((pred == c) & (gt == c) & ink)
        union = np.sum(((pred == c) | (gt == c)) & ink)
        support = np.sum((gt == c) & ink)
        freqs[c] = support / total
        if union:
            ious[c] = inter / union
        if support:
            recalls[c] = inter / support
    fw = sum(freqs[c] * ious.get(c, 0.0) for c in range(1, n + 1))
    return acc, np.mean(list(ious.values())), np.mean(list(recalls.values())), fw


def test_matches_confusion_matrix_oracle(rng):
    for _ in range(500):
        n = int(rng.integers(1, 6))
        categories = tuple(f"c{i}" for i in range(n))
        gt = rng.integers(0, n + 1, (16, 16))
        gt[0, 0] = 1
        pred = rng.integers(0, n + 1, (16, 16))
        acc = metrics.confusion(SegmentationMask(pred, categories), SegmentationMask(gt, categories))

        ink = gt > 0
        oracle_cm = confusion_matrix(gt[ink], pred[ink], labels=list(range(n + 1)))
        np.testing.assert_array_equal(acc.matrix, oracle_cm)

        scores = acc.scores()
        expected = _brute_force(pred, gt, n)
        assert (scores.acc_pixel, scores.miou, scores.mean_acc, scores.fwiou) == pytest.approx(expected, abs=1e-12)
        for m in scores.per_category.values():
            if m.acc is not None:
                assert m.iou <= m.acc + 1e-12


def test_fwiou_weights_sum_to_one(rng):
    categories = ("a", "b", "c")
    gt = SegmentationMask(rng.integers(1, 4, (8, 8)), categories)
    scores = metrics.confusion(gt, gt).scores()
    assert sum(m.support for m in scores.per_category.values()) == scores.total
    assert scores.fwiou == pytest.approx(1.0)


def _two_pass_pearson(x, y):
    mx, my = sum(x) / len(x), sum(y) / len(y)
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / (vx * vy) ** 0.5


def test_pearson_matches_two_pass_oracle(rng):
    for _ in range(100):
        x = rng.standard_normal(20).tolist()
        y = rng.standard_normal(20).tolist()
        assert abs(metrics.pearson_corr(x, y) - _two_pass_pearson(x, y)) <= 1e-9


def test_pearson_of_a_vector_with_itself(rng):
    for _ in range(20):
        x = rng.standard_normal(20) * 5.0 + 3.0
        assert abs(metrics.pearson_corr(x, x) - 1.0) <= 1e-12
        assert abs(metrics.pearson_corr(x, -x) + 1.0) <= 1e-12


def test_pearson_undefined_cases():
    with pytest.raises(EvaluationError):
        metrics.pearson_corr([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(EvaluationError):
        metrics.pearson_corr([1.0], [2.0])
    with pytest.raises(EvaluationError):
        metrics.pearson_corr([1.0, 2.0], [1.0, 2.0, 3.0])


def test_stroke_accuracy():
    assert metrics.acc_stroke({1: "a", 2: "b"}, {1: "a", 2: "a"}) == 0.5
    assert metrics.stroke_hits({1: 1, 2: 2, 3: 2}, {1: 1, 2: 2, 3: 1}) == (2, 3)
    with pytest.raises(EvaluationError):
        metrics.acc_stroke({1: "a"}, {2: "a"})
    with pytest.raises(EvaluationError):
        metrics.acc_stroke({}, {})


def test_majority_vote():
    masks = [_row([1, 1, 2, 0]), _row([1, 2, 2, 0]), _row([2, 1, 2, 1])]
    voted = metrics.majority_vote(masks)
    np.testing.assert_array_equal(voted.labels, [[1, 1, 2, 0]])
    assert voted.categories == AB


def test_majority_vote_of_one_annotator_is_that_annotator(rng):
    categories = ("cat", "tree", "sun")
    mask = SegmentationMask(rng.integers(0, 4, (6, 7)), categories)
    voted = metrics.majority_vote([mask], seed=3)
    np.testing.assert_array_equal(voted.names(), mask.names())
    np.testing.assert_array_equal(voted.labels > 0, mask.labels > 0)


def test_majority_vote_ties_are_seeded():
    masks = [_row([1, 2]), _row([2, 1])]
    a = metrics.majority_vote(masks, seed=5).labels
    b = metrics.majority_vote(masks, seed=5).labels
    np.testing.assert_array_equal(a, b)
    assert set(a.ravel()) <= {1, 2}
    with pytest.raises(EvaluationError):
        metrics.majority_vote([])
