from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np

from sketchseg.core.errors import ContractError, DimensionError
from sketchseg.models.schemas import CaptionRecord

INK_THRESHOLD = 0.5
BACKGROUND = 0


@dataclass(frozen=True)
class Stroke:
    id: int
    points: Tuple[Tuple[int, int], ...]
    width: int = 1

    def __post_init__(self) -> None:
        if len(self.points) < 2:
            raise ContractError(f"stroke {self.id} needs at least 2 points")
        if self.width < 1:
            raise ContractError(f"stroke {self.id} has width {self.width}")
        object.__setattr__(self, "points", tuple((int(x), int(y)) for x, y in self.points))


@dataclass(frozen=True)
class SketchBitmap:
    """Ink intensity in [0, 1]; 1 is ink, 0 is blank paper."""

    intensity: np.ndarray
    strokes: Optional[Tuple[Stroke, ...]] = None

    def __post_init__(self) -> None:
        arr = np.array(self.intensity, dtype=np.float32)
        if arr.ndim != 2:
            raise DimensionError("sketch intensity must be 2-D", arr.shape)
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ContractError("sketch intensity must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "intensity", arr)

    @property
    def height(self) -> int:
        return int(self.intensity.shape[0])

    @property
    def width(self) -> int:
        return int(self.intensity.shape[1])

    @property
    def ink_mask(self) -> np.ndarray:
        return self.intensity >= INK_THRESHOLD


@dataclass(frozen=True)
class SegmentationMask:
    """Label ids 1..N_c index `categories`; 0 is background."""

    labels: np.ndarray
    categories: Tuple[str, ...]

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DimensionError("mask labels must be 2-D", labels.shape)
        labels = np.array(labels, dtype=np.int32)
        if labels.size and (labels.min() < 0 or labels.max() > len(self.categories)):
            raise ContractError(
                f"mask labels must lie in [0, {len(self.categories)}], got [{labels.min()}, {labels.max()}]"
            )
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "categories", tuple(self.categories))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape

    def names(self) -> np.ndarray:
        """Per-pixel category name, '' on background."""
        lookup = np.array([""] + list(self.categories), dtype=object)
        return lookup[self.labels]


@dataclass(frozen=True)
class SimilarityMaps:
    patch_maps: np.ndarray  # [K, N_c]
    pixel_maps: np.ndarray  # [N_c, h, w]
    categories: Tuple[str, ...]

    def __post_init__(self) -> None:
        if self.patch_maps.shape[1] != len(self.categories) or self.pixel_maps.shape[0] != len(self.categories):
            raise DimensionError("similarity maps and categories disagree", self.patch_maps.shape, self.pixel_maps.shape)
        if not (np.all(np.isfinite(self.patch_maps)) and np.all(np.isfinite(self.pixel_maps))):
            raise ContractError("similarity maps must be finite")


@dataclass(frozen=True)
class TextToken:
    kind: Literal["CST", "CCT"]
    vector: np.ndarray
    source_text: str


@dataclass(frozen=True)
class DatasetItem:
    bitmap: SketchBitmap
    caption: CaptionRecord
    mask: Optional[SegmentationMask] = None

    @property
    def sketch_id(self) -> str:
        return self.caption.sketch_id

    @property
    def strokes(self) -> Optional[Tuple[Stroke, ...]]:
        return self.bitmap.strokes


@dataclass
class DatasetSplit:
    role: Literal["train", "val", "test"]
    items: List[DatasetItem] = field(default_factory=list)
    vocabulary: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.items)

    @property
    def has_masks(self) -> bool:
        return bool(self.items) and all(item.mask is not None for item in self.items)
