"""Segmentation metrics over ground-truth ink pixels.

Everything is read off one integer confusion matrix C[(N+1) x (N+1)] with
rows = ground truth, columns = prediction, index 0 = unlabeled/background
and 1..N = categories. Only pixels where the ground truth is labeled are
counted, so row 0 stays empty; a prediction of 0 on ink counts as wrong.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from sketchseg.core.errors import DimensionError, EvaluationError
from sketchseg.models.domain import BACKGROUND, SegmentationMask
from sketchseg.models.schemas import CategoryMetrics


def union_vocabulary(masks: Sequence[SegmentationMask], vocabulary: Optional[Sequence[str]] = None) -> Tuple[str, ...]:
    names: List[str] = list(vocabulary or ())
    for mask in masks:
        names.extend(c for c in mask.categories if c not in names)
    return tuple(names)


def remap_labels(mask: SegmentationMask, vocabulary: Sequence[str]) -> np.ndarray:
    """Label ids of `mask` re-expressed as 1-based indices into `vocabulary`."""
    index = {name: i for i, name in enumerate(vocabulary, start=1)}
    missing = [c for c in mask.categories if c not in index]
    if missing:
        raise EvaluationError(f"categories {missing} are not in the evaluation vocabulary")
    lookup = np.array([BACKGROUND] + [index[c] for c in mask.categories], dtype=np.int64)
    return lookup[mask.labels]


@dataclass
class ConfusionAccumulator:
    categories: Tuple[str, ...]
    matrix: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.categories = tuple(self.categories)
        n = len(self.categories) + 1
        if self.matrix is None:
            self.matrix = np.zeros((n, n), dtype=np.int64)
        elif self.matrix.shape != (n, n):
            raise DimensionError("confusion matrix does not match the vocabulary", self.matrix.shape, (n, n))

    @property
    def n_classes(self) -> int:
        return len(self.categories) + 1

    def add_labels(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise DimensionError("prediction and ground truth differ in size", pred.shape, gt.shape)
        evaluated = gt != BACKGROUND
        n = self.n_classes
        codes = n * gt[evaluated].astype(np.int64) + pred[evaluated].astype(np.int64)
        self.matrix += np.bincount(codes, minlength=n * n).reshape(n, n)

    def add(self, pred: SegmentationMask, gt: SegmentationMask) -> None:
        self.add_labels(remap_labels(pred, self.categories), remap_labels(gt, self.categories))

    def scores(self) -> "SegmentationScores":
        return SegmentationScores.from_matrix(self.matrix, self.categories)


@dataclass(frozen=True)
class SegmentationScores:
    acc_pixel: float
    miou: float
    mean_acc: float
    fwiou: float
    per_category: Dict[str, CategoryMetrics]
    total: int

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, categories: Sequence[str]) -> "SegmentationScores":
        cm = np.asarray(matrix, dtype=np.int64)
        total = int(cm.sum())
        if total == 0:
            raise EvaluationError("no ground-truth ink pixels to evaluate")
        tp = np.diag(cm)[1:]
        gt_count = cm.sum(axis=1)[1:]
        pred_count = cm.sum(axis=0)[1:]
        union = gt_count + pred_count - tp
        included = union > 0
        present = gt_count > 0

        per_category: Dict[str, CategoryMetrics] = {}
        ious = np.zeros(len(categories))
        for c, name in enumerate(categories):
            if not included[c]:
                continue
            ious[c] = tp[c] / union[c]
            recall = tp[c] / gt_count[c] if present[c] else None
            per_category[name] = CategoryMetrics(iou=float(ious[c]), acc=recall, support=int(gt_count[c]))

        freq = gt_count / total
        return cls(
            acc_pixel=float(tp.sum() / total),
            miou=float(ious[included].mean()),
            mean_acc=float(np.mean(tp[present] / gt_count[present])),
            fwiou=float(np.sum(freq * ious)),
            per_category=per_category,
            total=total,
        )


def confusion(pred: SegmentationMask, gt: SegmentationMask, vocabulary: Optional[Sequence[str]] = None) -> ConfusionAccumulator:
    acc = ConfusionAccumulator(union_vocabulary([gt, pred], vocabulary))
    acc.add(pred, gt)
    return acc


def acc_pixel(pred: SegmentationMask, gt: SegmentationMask) -> float:
    return confusion(pred, gt).scores().acc_pixel


def miou(pred: SegmentationMask, gt: SegmentationMask, vocabulary: Optional[Sequence[str]] = None) -> Tuple[float, Dict[str, float]]:
    scores = confusion(pred, gt, vocabulary).scores()
    return scores.miou, {name: m.iou for name, m in scores.per_category.items()}


def mean_acc(pred: SegmentationMask, gt: SegmentationMask, vocabulary: Optional[Sequence[str]] = None) -> float:
    return confusion(pred, gt, vocabulary).scores().mean_acc


def fwiou(pred: SegmentationMask, gt: SegmentationMask, vocabulary: Optional[Sequence[str]] = None) -> float:
    return confusion(pred, gt, vocabulary).scores().fwiou


def stroke_hits(pred: Mapping[int, Hashable], gt: Mapping[int, Hashable]) -> Tuple[int, int]:
    if set(pred) != set(gt):
        raise EvaluationError(f"stroke ids differ: {sorted(set(pred) ^ set(gt))[:5]}")
    return sum(1 for sid in gt if pred[sid] == gt[sid]), len(gt)


def acc_stroke(pred: Mapping[int, Hashable], gt: Mapping[int, Hashable]) -> float:
    """Fraction of strokes whose label matches; labels may be ids or category names."""
    correct, total = stroke_hits(pred, gt)
    if total == 0:
        raise EvaluationError("stroke accuracy of an empty stroke set is undefined")
    return correct / total


def pearson_corr(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise EvaluationError(f"correlation needs two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise EvaluationError("correlation needs at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise EvaluationError("correlation is undefined for a constant vector")
    return float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def majority_vote(masks: Sequence[SegmentationMask], seed: int = 0) -> SegmentationMask:
    """Per-pixel modal label across annotators; ties drawn uniformly with a seeded generator."""
    if not masks:
        raise EvaluationError("majority vote needs at least one mask")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise DimensionError("annotator masks differ in size", m.shape, shape)
    vocabulary = union_vocabulary(masks)
    n = len(vocabulary) + 1
    stacked = np.stack([remap_labels(m, vocabulary) for m in masks])
    votes = np.zeros((n,) + shape, dtype=np.int64)
    for label in range(n):
        votes[label] = (stacked == label).sum(axis=0)
    best = votes.max(axis=0)
    winners = votes == best
    labels = np.argmax(winners, axis=0)
    tied = winners.sum(axis=0) > 1
    rng = np.random.default_rng(seed)
    for y, x in zip(*np.nonzero(tied)):
        labels[y, x] = rng.choice(np.flatnonzero(winners[:, y, x]))
    return SegmentationMask(labels, vocabulary)


__all__ = [
    "ConfusionAccumulator",
    "SegmentationScores",
    "acc_pixel",
    "acc_stroke",
    "confusion",
    "fwiou",
    "majority_vote",
    "mean_acc",
    "miou",
    "pearson_corr",
    "remap_labels",
    "stroke_hits",
    "union_vocabulary",
]
