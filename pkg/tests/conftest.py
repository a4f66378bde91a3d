import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure repository root is on sys.path for `import sketchseg`
ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from sketchseg import config  # noqa: E402
from sketchseg.models.schemas import SynthConfig  # noqa: E402
from sketchseg.services.sketch_data import generate_synthetic  # noqa: E402
from sketchseg.services.text_embedding import TextEncoder  # noqa: E402
from sketchseg.vision.model import SketchSegmenter  # noqa: E402

TINY_ENCODER = dict(
    image_size=16, patch_size=8, d_model=8, d_joint=8, n_layers=2, n_heads=2,
    n_prompts=1, cross_attn_layers=(1, 2),
)


@pytest.fixture()
def tiny_encoder():
    return config.encoder_preset("desk", **TINY_ENCODER)


@pytest.fixture()
def tiny_training():
    return config.training_preset("desk", batch_size=2, learning_rate=1e-2, epochs=2, seed=0)


@pytest.fixture()
def synth_config():
    return SynthConfig(image_size=16, patch_size=8, min_glyphs=2, max_glyphs=2, glyph_min=4, glyph_max=6)


@pytest.fixture()
def tiny_split(synth_config):
    return generate_synthetic(synth_config, seed=3, n_items=4)


@pytest.fixture()
def text_encoder(tiny_encoder):
    return TextEncoder(tiny_encoder.d_joint, seed=0)


@pytest.fixture()
def tiny_model(tiny_encoder, tiny_training, text_encoder, synth_config):
    return SketchSegmenter.initialize(
        tiny_encoder, tiny_training, text=text_encoder, vocabulary=synth_config.lexicon[:3]
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
