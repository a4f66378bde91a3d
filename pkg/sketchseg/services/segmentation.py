from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from sketchseg.core.errors import ContractError, DimensionError
from sketchseg.core.tensor import no_grad
from sketchseg.models.domain import BACKGROUND, SegmentationMask, SimilarityMaps, SketchBitmap, Stroke
from sketchseg.services.sketch_data import stroke_pixels
from sketchseg.vision.losses import category_similarity_maps, pixel_map
from sketchseg.vision.model import SketchSegmenter

logger = logging.getLogger("sketchseg.segmentation")

ISOLATION_THRESHOLD = 0.71


def _check_categories(categories: Sequence[str]) -> Tuple[str, ...]:
    categories = tuple(categories)
    if not categories:
        raise ContractError("segmentation needs at least one category")
    if len(set(categories)) != len(categories):
        raise ContractError(f"categories must be unique, got {list(categories)}")
    return categories


def compute_similarity_maps(sketch: SketchBitmap, categories: Sequence[str], model: SketchSegmenter) -> SimilarityMaps:
    categories = _check_categories(categories)
    out = model.encode(sketch)
    ccts = model.category_vectors(categories)
    cfg = model.encoder
    with no_grad():
        patch_maps = category_similarity_maps(out.patches, ccts.astype(out.patches.dtype))
        pixel_maps = np.stack([
            pixel_map(patch_maps[:, c], cfg.grid, sketch.height, sketch.width).numpy()
            for c in range(len(categories))
        ])
    return SimilarityMaps(patch_maps=patch_maps.numpy(), pixel_maps=pixel_maps, categories=categories)


def segment_from_maps(maps: SimilarityMaps, sketch: SketchBitmap) -> SegmentationMask:
    """Argmax over categories on ink pixels; np.argmax keeps the lowest index on ties."""
    if maps.pixel_maps.shape[1:] != sketch.intensity.shape:
        raise DimensionError("pixel maps and sketch differ in size", maps.pixel_maps.shape[1:], sketch.intensity.shape)
    labels = np.argmax(maps.pixel_maps, axis=0).astype(np.int32) + 1
    labels[~sketch.ink_mask] = BACKGROUND
    return SegmentationMask(labels, maps.categories)


def segment(sketch: SketchBitmap, categories: Sequence[str], model: SketchSegmenter) -> SegmentationMask:
    return segment_from_maps(compute_similarity_maps(sketch, categories, model), sketch)


def isolation_mask(pixel_map_c: np.ndarray, sketch: SketchBitmap, tau: float = ISOLATION_THRESHOLD) -> np.ndarray:
    """Ink pixels whose clamped similarity reaches `tau`."""
    if not 0.0 <= tau < 1.0:
        raise ContractError(f"isolation threshold must lie in [0, 1), got {tau}")
    if pixel_map_c.shape != sketch.intensity.shape:
        raise DimensionError("pixel map and sketch differ in size", pixel_map_c.shape, sketch.intensity.shape)
    return sketch.ink_mask & (np.clip(pixel_map_c, 0.0, 1.0) >= tau)


def isolate_from_map(pixel_map_c: np.ndarray, sketch: SketchBitmap, tau: float = ISOLATION_THRESHOLD) -> SketchBitmap:
    keep = isolation_mask(pixel_map_c, sketch, tau)
    return SketchBitmap(np.where(keep, sketch.intensity, 0.0), strokes=sketch.strokes)


def isolate_category(
    sketch: SketchBitmap,
    category: str,
    model: SketchSegmenter,
    tau_inference: float = ISOLATION_THRESHOLD,
) -> SketchBitmap:
    """Hard-threshold isolation; the learned training threshold is not used here."""
    maps = compute_similarity_maps(sketch, [category], model)
    return isolate_from_map(maps.pixel_maps[0], sketch, tau_inference)


@dataclass
class StrokeLabeling:
    labels: Dict[int, int] = field(default_factory=dict)
    unlabeled: List[int] = field(default_factory=list)  # stroke ids with no labeled pixel


def stroke_labels(mask: SegmentationMask, strokes: Sequence[Stroke]) -> StrokeLabeling:
    """Modal non-background label per stroke; ties go to the lowest label id."""
    h, w = mask.shape
    result = StrokeLabeling()
    n_labels = len(mask.categories) + 1
    for stroke in strokes:
        pixels = mask.labels[stroke_pixels(stroke, h, w)]
        pixels = pixels[pixels != BACKGROUND]
        if pixels.size == 0:
            result.labels[stroke.id] = BACKGROUND
            result.unlabeled.append(stroke.id)
            continue
        result.labels[stroke.id] = int(np.argmax(np.bincount(pixels, minlength=n_labels)))
    if result.unlabeled:
        logger.warning(
            "Strokes without labeled pixels",
            extra={"event": "strokes_unlabeled", "stroke_ids": result.unlabeled},
        )
    return result


def threshold_sweep(
    sketch: SketchBitmap,
    gt: SegmentationMask,
    category: str,
    model: SketchSegmenter,
    taus: Sequence[float],
) -> List[Tuple[float, float]]:
    """Acc@P of category-versus-rest isolation over the ink pixels, one row per threshold."""
    if gt.shape != sketch.intensity.shape:
        raise DimensionError("ground truth and sketch differ in size", gt.shape, sketch.intensity.shape)
    ink = sketch.ink_mask
    if not ink.any():
        raise ContractError("threshold sweep needs a sketch with ink")
    truth = gt.names() == category
    pixel = compute_similarity_maps(sketch, [category], model).pixel_maps[0]
    rows = []
    for tau in taus:
        keep = isolation_mask(pixel, sketch, float(tau))
        rows.append((float(tau), float(np.mean(keep[ink] == truth[ink]))))
    return rows


__all__ = [
    "ISOLATION_THRESHOLD",
    "StrokeLabeling",
    "compute_similarity_maps",
    "isolate_category",
    "isolate_from_map",
    "isolation_mask",
    "segment",
    "segment_from_maps",
    "stroke_labels",
    "threshold_sweep",
]
