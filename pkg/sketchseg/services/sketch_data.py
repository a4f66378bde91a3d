from __future__ import annotations

import json
import logging
import math
import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from sketchseg.core import functional as F
from sketchseg.core.errors import DatasetLoadError, DatasetShapeError, GenerationError
from sketchseg.core.tensor import no_grad
from sketchseg.models.domain import (
    BACKGROUND,
    DatasetItem,
    DatasetSplit,
    SegmentationMask,
    SketchBitmap,
    Stroke,
)
from sketchseg.models.schemas import CaptionRecord, SynthConfig
from sketchseg.services import imaging

logger = logging.getLogger("sketchseg.data")

SPLIT_ROLES = ("train", "val", "test")
PLACEMENT_ROUNDS = 50


# ---------------- Rasterization and patches ----------------


def _line_pixels(x0: int, y0: int, x1: int, y1: int) -> List[Tuple[int, int]]:
    """Integer line walk (Bresenham) including both endpoints."""
    pixels = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        pixels.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pixels
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def stroke_pixels(stroke: Stroke, h: int, w: int) -> np.ndarray:
    """Boolean footprint of one stroke; points are clamped into the canvas."""
    canvas = np.zeros((h, w), dtype=bool)
    pts = [(min(max(x, 0), w - 1), min(max(y, 0), h - 1)) for x, y in stroke.points]
    lo = (stroke.width - 1) // 2
    hi = stroke.width // 2
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        for x, y in _line_pixels(x0, y0, x1, y1):
            canvas[max(y - lo, 0): min(y + hi, h - 1) + 1, max(x - lo, 0): min(x + hi, w - 1) + 1] = True
    return canvas


def rasterize_strokes(strokes: Sequence[Stroke], h: int, w: int) -> SketchBitmap:
    ink = np.zeros((h, w), dtype=bool)
    for stroke in strokes:
        ink |= stroke_pixels(stroke, h, w)
    return SketchBitmap(ink.astype(np.float32), strokes=tuple(strokes))


def patchify(bitmap: SketchBitmap, patch: int) -> np.ndarray:
    """K = (h/patch)*(w/patch) row-major patches, each flattened row-major -> [K, patch*patch]."""
    with no_grad():
        return F.patchify(bitmap.intensity, patch).numpy()


def unpatchify(patches: np.ndarray, patch: int, height: int, width: int) -> SketchBitmap:
    with no_grad():
        return SketchBitmap(F.unpatchify(patches, patch, height, width).numpy())


# ---------------- Captions ----------------

_WORD = re.compile(r"[a-z0-9]+")


def extract_categories(caption: str, lexicon: Iterable[str]) -> Tuple[str, ...]:
    """Lexicon matching over lowercase word tokens; multi-word entries win over their prefixes."""
    words = _WORD.findall(caption.lower())
    entries = sorted({tuple(_WORD.findall(e.lower())) for e in lexicon if e.strip()}, key=len, reverse=True)
    found: List[str] = []
    i = 0
    while i < len(words):
        for entry in entries:
            if entry and tuple(words[i: i + len(entry)]) == entry:
                name = " ".join(entry)
                if name not in found:
                    found.append(name)
                i += len(entry)
                break
        else:
            i += 1
    return tuple(found)


# ---------------- Disk layout ----------------


def _read_jsonl(path: Path) -> List[dict]:
    rows = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DatasetLoadError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
    return rows


def _read_labels(root: Path) -> Optional[Tuple[str, ...]]:
    path = root / "labels.json"
    if not path.exists():
        return None
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetLoadError(f"{path}: invalid JSON ({e.msg})") from e
    table = {int(k): str(v).lower() for k, v in raw.items() if int(k) != BACKGROUND}
    expected = list(range(1, len(table) + 1))
    if sorted(table) != expected:
        raise DatasetLoadError(f"{path}: label indices must be 1..{len(table)}, got {sorted(table)}")
    return tuple(table[i] for i in expected)


def _read_strokes(path: Path) -> Tuple[Stroke, ...]:
    strokes = []
    for row in _read_jsonl(path):
        try:
            strokes.append(Stroke(id=int(row["id"]), points=tuple(tuple(p) for p in row["points"]),
                                  width=int(row.get("width", 1))))
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetLoadError(f"{path}: malformed stroke {row!r}") from e
    return tuple(strokes)


def _read_captions(path: Path, lexicon: Sequence[str]) -> Dict[str, CaptionRecord]:
    records: Dict[str, CaptionRecord] = {}
    for row in _read_jsonl(path):
        if "id" not in row:
            raise DatasetLoadError(f"{path}: caption row without id")
        sketch_id = str(row["id"])
        if not row.get("categories"):
            row = {**row, "categories": list(extract_categories(row.get("caption", ""), lexicon))}
        try:
            record = CaptionRecord(**{**row, "id": sketch_id})
        except ValidationError as e:
            raise DatasetLoadError(f"caption for sketch {sketch_id!r} is invalid: {e}") from e
        if sketch_id in records:
            raise DatasetLoadError(f"duplicate caption for sketch {sketch_id!r}")
        records[sketch_id] = record
    return records


def load_split(split_dir: Path, role: str, vocabulary: Optional[Tuple[str, ...]]) -> DatasetSplit:
    sketch_dir = split_dir / "sketches"
    captions_path = split_dir / "captions.jsonl"
    captions = _read_captions(captions_path, vocabulary or ()) if captions_path.exists() else {}
    sketch_paths = sorted(sketch_dir.glob("*.png"), key=lambda p: p.stem) if sketch_dir.exists() else []
    ids = [p.stem for p in sketch_paths]
    orphans = sorted(set(captions) - set(ids))
    if orphans:
        raise DatasetLoadError(f"{role}: caption without sketch for id {orphans[0]!r}")

    items: List[DatasetItem] = []
    for path in sketch_paths:
        sketch_id = path.stem
        if sketch_id not in captions:
            raise DatasetLoadError(f"{role}: missing caption for sketch {sketch_id!r}")
        stroke_path = split_dir / "strokes" / f"{sketch_id}.jsonl"
        strokes = _read_strokes(stroke_path) if stroke_path.exists() else None
        bitmap = imaging.read_sketch_png(path, strokes=strokes)
        mask = None
        mask_path = split_dir / "masks" / f"{sketch_id}.png"
        if mask_path.exists():
            if vocabulary is None:
                raise DatasetLoadError(f"{role}: masks present but labels.json is missing")
            labels = imaging.read_label_png(mask_path)
            if labels.shape != bitmap.intensity.shape:
                raise DatasetShapeError(
                    f"{role}: mask for sketch {sketch_id!r} does not match the sketch",
                    labels.shape,
                    bitmap.intensity.shape,
                )
            if labels.max(initial=0) > len(vocabulary):
                raise DatasetLoadError(f"{role}: mask for sketch {sketch_id!r} uses unknown label {labels.max()}")
            mask = SegmentationMask(labels, vocabulary)
        items.append(DatasetItem(bitmap=bitmap, caption=captions[sketch_id], mask=mask))
    return DatasetSplit(role=role, items=items, vocabulary=vocabulary or ())


def load_dataset(root_dir: str | Path) -> Dict[str, DatasetSplit]:
    """One split per role subdirectory, items in lexicographic sketch-id order."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetLoadError(f"dataset root {root} is not a directory")
    vocabulary = _read_labels(root)
    splits = {
        role: load_split(root / role, role, vocabulary)
        for role in SPLIT_ROLES
        if (root / role).is_dir()
    }
    # Caption categories missing from labels.json extend the shared vocabulary.
    known = list(vocabulary or ())
    extra = sorted({c for s in splits.values() for it in s.items for c in it.caption.categories} - set(known))
    shared = tuple(known + extra)
    for split in splits.values():
        split.vocabulary = shared
    logger.info(
        "Dataset loaded",
        extra={"event": "dataset_loaded", "root": str(root),
               "sizes": {role: len(s) for role, s in splits.items()}},
    )
    return splits


def save_dataset(splits: Dict[str, DatasetSplit], root_dir: str | Path) -> None:
    root = Path(root_dir)
    root.mkdir(parents=True, exist_ok=True)
    vocabulary: Tuple[str, ...] = ()
    for split in splits.values():
        if split.vocabulary:
            vocabulary = split.vocabulary
    (root / "labels.json").write_text(
        json.dumps({str(i): name for i, name in enumerate(vocabulary, start=1)}, indent=2) + "\n",
        encoding="utf-8",
    )
    for role, split in splits.items():
        split_dir = root / role
        (split_dir / "sketches").mkdir(parents=True, exist_ok=True)
        lines = []
        for item in sorted(split.items, key=lambda it: it.sketch_id):
            imaging.write_sketch_png(item.bitmap, split_dir / "sketches" / f"{item.sketch_id}.png")
            lines.append(json.dumps({"id": item.sketch_id, "caption": item.caption.caption,
                                     "categories": list(item.caption.categories)}))
            if item.mask is not None:
                (split_dir / "masks").mkdir(exist_ok=True)
                remap = _remap_to(item.mask, vocabulary)
                imaging.write_mask_png(remap, split_dir / "masks" / f"{item.sketch_id}.png")
            if item.strokes:
                (split_dir / "strokes").mkdir(exist_ok=True)
                with (split_dir / "strokes" / f"{item.sketch_id}.jsonl").open("w", encoding="utf-8") as f:
                    for s in item.strokes:
                        f.write(json.dumps({"id": s.id, "points": [list(p) for p in s.points],
                                            "width": s.width}) + "\n")
        (split_dir / "captions.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _remap_to(mask: SegmentationMask, vocabulary: Tuple[str, ...]) -> SegmentationMask:
    if mask.categories == vocabulary:
        return mask
    index = {name: i for i, name in enumerate(vocabulary, start=1)}
    lookup = np.array([BACKGROUND] + [index[c] for c in mask.categories], dtype=np.int32)
    return SegmentationMask(lookup[mask.labels], vocabulary)


# ---------------- Synthetic glyph scenes ----------------


def _glyph_strokes(kind: str, x0: int, y0: int, size: int, first_id: int, width: int) -> List[Stroke]:
    s = size - 1
    if kind == "circle":
        r = s / 2.0
        cx, cy = x0 + r, y0 + r
        pts = [(int(round(cx + r * math.cos(2 * math.pi * t / 16))), int(round(cy + r * math.sin(2 * math.pi * t / 16))))
               for t in range(17)]
        polylines = [pts]
    elif kind == "box":
        polylines = [[(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s), (x0, y0)]]
    elif kind == "cross":
        polylines = [[(x0, y0), (x0 + s, y0 + s)], [(x0 + s, y0), (x0, y0 + s)]]
    elif kind == "zigzag":
        steps = 4
        polylines = [[(x0 + round(i * s / steps), y0 + (0 if i % 2 == 0 else s)) for i in range(steps + 1)]]
    elif kind == "triangle":
        polylines = [[(x0 + s // 2, y0), (x0 + s, y0 + s), (x0, y0 + s), (x0 + s // 2, y0)]]
    elif kind == "plus":
        polylines = [[(x0 + s // 2, y0), (x0 + s // 2, y0 + s)], [(x0, y0 + s // 2), (x0 + s, y0 + s // 2)]]
    else:
        raise GenerationError(f"no glyph drawing for category {kind!r}")
    return [Stroke(id=first_id + i, points=tuple(p), width=width) for i, p in enumerate(polylines)]


def _grid_capacity(canvas: int, size: int, gap: int) -> int:
    """Most axis-aligned squares of side `size`, `gap` apart, that fit on the canvas."""
    per_row = (canvas + gap) // (size + gap)
    return per_row * per_row


def _try_place(rng: np.random.Generator, cfg: SynthConfig, n: int, gap: int) -> Optional[List[Tuple[int, int, int]]]:
    boxes: List[Tuple[int, int, int]] = []
    largest = min(cfg.glyph_max, cfg.image_size)
    for _ in range(n):
        for _attempt in range(cfg.max_attempts):
            size = int(rng.integers(cfg.glyph_min, largest + 1))
            x = int(rng.integers(0, cfg.image_size - size + 1))
            y = int(rng.integers(0, cfg.image_size - size + 1))
            if all(x + size + gap <= bx or bx + bs + gap <= x or y + size + gap <= by or by + bs + gap <= y
                   for bx, by, bs in boxes):
                boxes.append((x, y, size))
                break
        else:
            return None
    return boxes


def _grid_place(rng: np.random.Generator, cfg: SynthConfig, n: int, gap: int) -> List[Tuple[int, int, int]]:
    """Smallest glyphs on distinct cells of a regular grid; succeeds whenever the canvas can hold n."""
    pitch = cfg.glyph_min + gap
    per_row = (cfg.image_size + gap) // pitch
    cells = rng.choice(per_row * per_row, size=n, replace=False)
    return [(int(c % per_row) * pitch, int(c // per_row) * pitch, cfg.glyph_min) for c in cells]


def _place_boxes(rng: np.random.Generator, cfg: SynthConfig, n: int, gap: int) -> List[Tuple[int, int, int]]:
    """Random non-overlapping glyph boxes (x, y, size), kept `gap` pixels apart.

    The whole layout is redrawn when a glyph finds no room; after
    PLACEMENT_ROUNDS failed layouts the glyphs go on a grid.
    """
    if _grid_capacity(cfg.image_size, cfg.glyph_min, gap) < n:
        raise GenerationError(
            f"cannot place {n} glyphs of size >= {cfg.glyph_min} on a {cfg.image_size}px canvas"
        )
    for _round in range(PLACEMENT_ROUNDS):
        boxes = _try_place(rng, cfg, n, gap)
        if boxes is not None:
            return boxes
    logger.debug("Glyph layout fell back to the grid", extra={"event": "synth_grid_layout", "glyphs": n})
    return _grid_place(rng, cfg, n, gap)


def generate_item(rng: np.random.Generator, cfg: SynthConfig, sketch_id: str) -> DatasetItem:
    n = int(rng.integers(cfg.min_glyphs, cfg.max_glyphs + 1))
    kinds = [cfg.lexicon[i] for i in rng.choice(len(cfg.lexicon), size=n, replace=False)]
    boxes = _place_boxes(rng, cfg, n, gap=cfg.stroke_width + 1)
    h = w = cfg.image_size
    labels = np.zeros((h, w), dtype=np.int32)
    strokes: List[Stroke] = []
    for kind, (x, y, size) in zip(kinds, boxes):
        glyph = _glyph_strokes(kind, x, y, size, first_id=len(strokes), width=cfg.stroke_width)
        strokes.extend(glyph)
        footprint = np.zeros((h, w), dtype=bool)
        for stroke in glyph:
            footprint |= stroke_pixels(stroke, h, w)
        labels[footprint] = cfg.lexicon.index(kind) + 1
    bitmap = rasterize_strokes(strokes, h, w)
    caption = CaptionRecord(
        id=sketch_id,
        caption=" and ".join(f"a {k}" for k in kinds),
        categories=tuple(kinds),
    )
    return DatasetItem(bitmap=bitmap, caption=caption, mask=SegmentationMask(labels, cfg.lexicon))


def generate_synthetic(config: SynthConfig, seed: int, n_items: int = 8, role: str = "train") -> DatasetSplit:
    """Seeded glyph scenes with exact per-pixel ground truth; the same seed gives identical data."""
    if config.glyph_min > config.image_size:
        raise GenerationError(f"glyph size {config.glyph_min} exceeds the {config.image_size}px canvas")
    rng = np.random.default_rng(seed)
    items = [generate_item(rng, config, f"{role}_{seed}_{i:05d}") for i in range(n_items)]
    return DatasetSplit(role=role, items=items, vocabulary=tuple(config.lexicon))


__all__ = [
    "SPLIT_ROLES",
    "extract_categories",
    "generate_item",
    "generate_synthetic",
    "load_dataset",
    "load_split",
    "patchify",
    "rasterize_strokes",
    "save_dataset",
    "stroke_pixels",
    "unpatchify",
]
