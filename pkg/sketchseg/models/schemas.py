# sketchseg/models/schemas.py
from __future__ import annotations

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# --- Caption record ---
# One line of captions.jsonl; `id` on disk, `sketch_id` in code
class CaptionRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True)

    sketch_id: str = Field(alias="id")
    caption: str = ""
    categories: Tuple[str, ...]

    @field_validator("categories", mode="before")
    @classmethod
    def normalize_categories(cls, v):
        if isinstance(v, str):
            v = [v]
        return tuple(" ".join(str(c).split()).lower() for c in v)

    @field_validator("categories")
    @classmethod
    def check_categories(cls, v: Tuple[str, ...]) -> Tuple[str, ...]:
        if not v:
            raise ValueError("categories must be non-empty")
        if any(not c for c in v):
            raise ValueError("category names must be non-empty")
        if len(set(v)) != len(v):
            raise ValueError(f"categories must be unique, got {list(v)}")
        return v

    @property
    def n_categories(self) -> int:
        return len(self.categories)


# --- Encoder architecture ---
class EncoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_size: int = Field(default=64, ge=2)
    patch_size: int = Field(default=8, ge=1)
    d_model: int = Field(default=64, ge=1)
    d_joint: int = Field(default=32, ge=1)
    n_layers: int = Field(default=6, ge=1)
    n_heads: int = Field(default=4, ge=1)
    n_prompts: int = Field(default=3, ge=0)
    cross_attn_layers: Tuple[int, ...] = (3, 5, 6)
    mlp_ratio: int = Field(default=4, ge=1)
    ln_eps: float = Field(default=1e-5, gt=0)
    use_vv_path: bool = True
    text_seed: int = 0
    init_seed: int = 0

    @field_validator("cross_attn_layers", mode="before")
    @classmethod
    def parse_layers(cls, v):
        if isinstance(v, str):
            v = [p for p in v.replace(" ", "").split(",") if p]
        return tuple(sorted({int(x) for x in v}))

    @model_validator(mode="after")
    def check_shapes(self) -> "EncoderConfig":
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.image_size // self.patch_size < 2:
            raise ValueError(f"patch grid must be at least 2x2 for bicubic upscaling, got {self.grid}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        bad = [l for l in self.cross_attn_layers if not 1 <= l <= self.n_layers]
        if bad:
            raise ValueError(f"cross_attn_layers {bad} outside [1, {self.n_layers}]")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_patches + self.n_prompts

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


NegativeMining = Literal["hardest-closest", "paper-literal-most-dissimilar"]
FinetunePolicy = Literal["ln+vp", "ln", "vp", "full"]


# --- Optimization and objective ---
class TrainingConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    margin: float = Field(default=0.3, gt=0)
    batch_size: int = Field(default=16, ge=2)
    learning_rate: float = Field(default=1e-6, ge=0)
    weight_decay: float = Field(default=0.0, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    epochs: int = Field(default=20, ge=0)
    negative_mining: NegativeMining = "hardest-closest"
    threshold_init: float = Field(default=0.3, gt=0, lt=1)
    threshold_gate_steepness: float = Field(default=50.0, gt=0)
    seed: int = 0
    use_global_loss: bool = True
    use_category_loss: bool = True
    use_cross_attention: bool = True
    multi_layer_loss: bool = True
    disentangle_mode: Literal["threshold", "weight"] = "threshold"
    finetune: FinetunePolicy = "ln+vp"
    checkpoint_every: int = Field(default=1, ge=1)

    @field_validator("learning_rate")
    @classmethod
    def finite_lr(cls, v: float) -> float:
        if v != v or v == float("inf"):
            raise ValueError("learning_rate must be finite")
        return v

    @model_validator(mode="after")
    def check_losses(self) -> "TrainingConfig":
        if not (self.use_global_loss or self.use_category_loss):
            raise ValueError("use_global_loss and use_category_loss cannot both be off")
        return self


# --- Synthetic glyph scenes ---
class SynthConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_size: int = Field(default=64, ge=4)
    patch_size: int = Field(default=8, ge=1)
    min_glyphs: int = Field(default=2, ge=1)
    max_glyphs: int = Field(default=3, ge=1)
    glyph_min: int = Field(default=14, ge=3)
    glyph_max: int = Field(default=22, ge=3)
    stroke_width: int = Field(default=1, ge=1)
    lexicon: Tuple[str, ...] = ("circle", "zigzag", "box", "cross", "triangle")
    max_attempts: int = Field(default=200, ge=1)

    @model_validator(mode="after")
    def check_ranges(self) -> "SynthConfig":
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.min_glyphs > self.max_glyphs:
            raise ValueError("min_glyphs exceeds max_glyphs")
        if self.glyph_min > self.glyph_max:
            raise ValueError("glyph_min exceeds glyph_max")
        if self.max_glyphs > len(self.lexicon):
            raise ValueError("max_glyphs exceeds the number of distinct glyph categories")
        return self


# --- Evaluation report ---
class CategoryMetrics(BaseModel):
    iou: Optional[float] = Field(default=None, ge=0, le=1)
    acc: Optional[float] = Field(default=None, ge=0, le=1)
    support: int = Field(default=0, ge=0)


class ItemMetrics(BaseModel):
    sketch_id: str
    acc_pixel: float = Field(ge=0, le=1)
    miou: float = Field(ge=0, le=1)
    acc_stroke: Optional[float] = Field(default=None, ge=0, le=1)


class MetricsReport(BaseModel):
    acc_pixel: float = Field(ge=0, le=1)
    acc_stroke: Optional[float] = Field(default=None, ge=0, le=1)
    miou: float = Field(ge=0, le=1)
    mean_acc: float = Field(ge=0, le=1)
    fwiou: float = Field(ge=0, le=1)
    per_category: Dict[str, CategoryMetrics] = {}
    n_items: int = Field(ge=0)
    acc_frequency_corr: Optional[float] = Field(default=None, ge=-1, le=1)
    acc_pixel_seen: Optional[float] = Field(default=None, ge=0, le=1)
    acc_pixel_unseen: Optional[float] = Field(default=None, ge=0, le=1)
    items: Optional[List[ItemMetrics]] = None

    @property
    def acc_category(self) -> Optional[float]:
        """Acc@C as printed in some result tables; the same quantity as Acc@S."""
        return self.acc_stroke


# --- Training log line ---
class TrainingLogRecord(BaseModel):
    step: int
    loss_global: float
    loss_category: float
    tau: float
    lr: float
