from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from sketchseg.core.errors import ContractError, DatasetLoadError
from sketchseg.models.domain import BACKGROUND, SegmentationMask, SketchBitmap

# Overlay colors by category index (label 1 -> PALETTE[0]); wraps after 12.
PALETTE: Tuple[Tuple[int, int, int], ...] = (
    (230, 25, 75),
    (60, 180, 75),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (0, 128, 128),
    (170, 110, 40),
    (128, 0, 0),
    (0, 0, 128),
)
PAPER_RGB = (255, 255, 255)


def palette_color(label: int) -> Tuple[int, int, int]:
    return PALETTE[(label - 1) % len(PALETTE)]


def read_sketch_png(path: str | Path, strokes=None) -> SketchBitmap:
    """8-bit grayscale, 255 = ink."""
    try:
        with Image.open(path) as img:
            raw = np.asarray(img.convert("L"), dtype=np.float32)
    except OSError as e:
        raise DatasetLoadError(f"cannot read sketch {path}: {e}") from e
    return SketchBitmap(raw / 255.0, strokes=strokes)


def write_sketch_png(bitmap: SketchBitmap, path: str | Path) -> None:
    raw = np.clip(np.rint(bitmap.intensity * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(raw).save(path, format="PNG")


def read_label_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P"):
                raise DatasetLoadError(f"mask {path} must be 8-bit single channel, got mode {img.mode}")
            return np.asarray(img, dtype=np.int32)
    except OSError as e:
        raise DatasetLoadError(f"cannot read mask {path}: {e}") from e


def write_mask_png(mask: SegmentationMask, path: str | Path) -> None:
    """Indexed PNG: pixel value = label id, palette colors for viewers."""
    if mask.labels.size and int(mask.labels.max()) > 255:
        raise ContractError(f"label {int(mask.labels.max())} does not fit an 8-bit mask PNG")
    labels = np.ascontiguousarray(mask.labels.astype(np.uint8))
    img = Image.frombytes("P", (labels.shape[1], labels.shape[0]), labels.tobytes())
    flat = list(PAPER_RGB)
    for label in range(1, 256):
        flat.extend(palette_color(label))
    img.putpalette(flat)
    img.save(path, format="PNG")


def render_overlay(bitmap: SketchBitmap, mask: SegmentationMask, keep: Optional[np.ndarray] = None) -> np.ndarray:
    """RGB image: paper white, labeled ink in its category color, unlabeled ink black."""
    h, w = bitmap.intensity.shape
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[...] = PAPER_RGB
    ink = bitmap.ink_mask
    rgb[ink] = (0, 0, 0)
    labels = mask.labels
    shown = labels != BACKGROUND if keep is None else (labels != BACKGROUND) & keep
    for label in np.unique(labels[shown]):
        rgb[shown & (labels == label)] = palette_color(int(label))
    return rgb


def write_overlay_png(rgb: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format="PNG")


def overlay_colors(rgb: np.ndarray) -> Sequence[Tuple[int, int, int]]:
    """Distinct non-paper, non-black colors present in an overlay."""
    flat = {tuple(int(c) for c in px) for px in rgb.reshape(-1, 3)}
    return sorted(flat - {PAPER_RGB, (0, 0, 0)})
