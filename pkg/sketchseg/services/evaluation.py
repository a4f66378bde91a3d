from __future__ import annotations

import logging
from collections import Counter
from typing import List, Optional

import numpy as np

from sketchseg.core.errors import EvaluationError
from sketchseg.models.domain import BACKGROUND, DatasetSplit
from sketchseg.models.schemas import ItemMetrics, MetricsReport
from sketchseg.services import metrics
from sketchseg.services.segmentation import segment, stroke_labels
from sketchseg.vision.model import SketchSegmenter

logger = logging.getLogger("sketchseg.evaluation")


def _stroke_names(mask, strokes) -> dict:
    names = ("",) + tuple(mask.categories)
    return {sid: names[label] for sid, label in stroke_labels(mask, strokes).labels.items()}


def evaluate_split(model: SketchSegmenter, split: DatasetSplit, per_item: bool = False) -> MetricsReport:
    """Segment every item with its caption categories and score against the ground truth."""
    if not split.items:
        raise EvaluationError(f"split {split.role!r} is empty")
    if not split.has_masks:
        raise EvaluationError(f"split {split.role!r} has no ground-truth masks")

    vocabulary = tuple(split.vocabulary) or metrics.union_vocabulary([it.mask for it in split.items])
    total = metrics.ConfusionAccumulator(vocabulary)
    seen = set(model.vocabulary)
    seen_hits = np.zeros(2, dtype=np.int64)  # correct, total
    unseen_hits = np.zeros(2, dtype=np.int64)
    stroke_correct = stroke_total = 0
    occurrences: Counter = Counter()
    rows: List[ItemMetrics] = []

    for item in split.items:
        pred = segment(item.bitmap, item.caption.categories, model)
        pred_labels = metrics.remap_labels(pred, vocabulary)
        gt_labels = metrics.remap_labels(item.mask, vocabulary)
        total.add_labels(pred_labels, gt_labels)
        occurrences.update(set(item.mask.names()[gt_labels != BACKGROUND]))

        if seen:
            ink = gt_labels != BACKGROUND
            gt_names = item.mask.names()
            correct = pred_labels == gt_labels
            in_seen = ink & np.isin(gt_names, list(seen))
            in_unseen = ink & ~in_seen
            seen_hits += (int(correct[in_seen].sum()), int(in_seen.sum()))
            unseen_hits += (int(correct[in_unseen].sum()), int(in_unseen.sum()))

        item_stroke_acc: Optional[float] = None
        if item.strokes:
            hits, count = metrics.stroke_hits(_stroke_names(pred, item.strokes), _stroke_names(item.mask, item.strokes))
            stroke_correct += hits
            stroke_total += count
            item_stroke_acc = hits / count if count else None

        if per_item:
            item_acc = metrics.ConfusionAccumulator(vocabulary)
            item_acc.add_labels(pred_labels, gt_labels)
            scores = item_acc.scores()
            rows.append(ItemMetrics(sketch_id=item.sketch_id, acc_pixel=scores.acc_pixel,
                                    miou=scores.miou, acc_stroke=item_stroke_acc))

    scores = total.scores()
    present = [name for name, m in scores.per_category.items() if m.acc is not None]
    corr: Optional[float] = None
    if len(present) >= 2:
        try:
            corr = metrics.pearson_corr([scores.per_category[n].acc for n in present],
                                        [occurrences[n] for n in present])
        except EvaluationError:
            corr = None

    report = MetricsReport(
        acc_pixel=scores.acc_pixel,
        acc_stroke=stroke_correct / stroke_total if stroke_total else None,
        miou=scores.miou,
        mean_acc=scores.mean_acc,
        fwiou=scores.fwiou,
        per_category=scores.per_category,
        n_items=len(split.items),
        acc_frequency_corr=corr,
        acc_pixel_seen=float(seen_hits[0] / seen_hits[1]) if seen_hits[1] else None,
        acc_pixel_unseen=float(unseen_hits[0] / unseen_hits[1]) if unseen_hits[1] else None,
        items=rows if per_item else None,
    )
    logger.info(
        "Split evaluated",
        extra={"event": "split_evaluated", "role": split.role, "n_items": report.n_items,
               "miou": report.miou, "acc_pixel": report.acc_pixel},
    )
    return report


__all__ = ["evaluate_split"]
