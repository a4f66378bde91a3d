# sketchseg/config.py
from __future__ import annotations

import os
from pathlib import Path
from typing import Dict, Tuple

from dotenv import load_dotenv
from pydantic import ValidationError

from sketchseg.core.errors import ConfigError
from sketchseg.models.schemas import EncoderConfig, TrainingConfig

load_dotenv()

LOG_LEVEL = os.getenv("SKETCHSEG_LOG_LEVEL", "INFO").upper()
DEFAULT_SEED = int(os.getenv("SKETCHSEG_SEED", "0"))
TEXT_EMBEDDINGS_PATH = os.getenv("SKETCHSEG_TEXT_EMBEDDINGS") or None
DATA_ROOT = os.getenv("SKETCHSEG_DATA_ROOT", "data")

# ViT-B/16 scale is expressible; only the two small presets run in tests.
ENCODER_PRESETS: Dict[str, Dict[str, object]] = {
    "desk": dict(image_size=64, patch_size=8, d_model=64, d_joint=32, n_layers=6, n_heads=4,
                 n_prompts=3, cross_attn_layers=(3, 5, 6)),
    "gradcheck": dict(image_size=32, patch_size=8, d_model=32, d_joint=16, n_layers=3, n_heads=2,
                      n_prompts=3, cross_attn_layers=(2, 3)),
    "vit-b16": dict(image_size=224, patch_size=16, d_model=768, d_joint=512, n_layers=12, n_heads=12,
                  n_prompts=3, cross_attn_layers=(7, 10, 12)),
}

TRAINING_PRESETS: Dict[str, Dict[str, object]] = {
    "desk": dict(batch_size=8, learning_rate=3e-3, epochs=25),
    "vit-b16": dict(batch_size=16, learning_rate=1e-6, epochs=20),
}


def encoder_preset(name: str = "desk", **overrides) -> EncoderConfig:
    if name not in ENCODER_PRESETS:
        raise ConfigError(f"unknown encoder preset {name!r}")
    return build_config(EncoderConfig, {**ENCODER_PRESETS[name], **overrides})


def training_preset(name: str = "desk", **overrides) -> TrainingConfig:
    if name not in TRAINING_PRESETS:
        raise ConfigError(f"unknown training preset {name!r}")
    return build_config(TrainingConfig, {"seed": DEFAULT_SEED, **TRAINING_PRESETS[name], **overrides})


def build_config(model, values: Dict[str, object]):
    try:
        return model(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid {model.__name__}: {e}") from e


def parse_config_text(text: str) -> Dict[str, str]:
    """Flat `key = value` lines; `#` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config_file(path: str | Path) -> Tuple[EncoderConfig, TrainingConfig]:
    """Route keys to EncoderConfig or TrainingConfig by field name; `preset` picks the base values."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    values = parse_config_text(text)
    preset = values.pop("preset", "desk")
    enc_keys = set(EncoderConfig.model_fields)
    train_keys = set(TrainingConfig.model_fields)
    unknown = sorted(k for k in values if k not in enc_keys | train_keys)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    enc_values = {k: v for k, v in values.items() if k in enc_keys}
    train_values = {k: v for k, v in values.items() if k in train_keys and k not in enc_keys}
    encoder = encoder_preset(preset, **enc_values)
    training = training_preset(preset if preset in TRAINING_PRESETS else "desk", **train_values)
    return encoder, training


def render_config_text(encoder: EncoderConfig, training: TrainingConfig) -> str:
    lines = []
    for cfg in (encoder, training):
        for key, value in cfg.model_dump().items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
