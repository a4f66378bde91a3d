from __future__ import annotations

import pytest

from sketchseg import config
from sketchseg.core.errors import ConfigError


def test_presets():
    desk = config.encoder_preset("desk")
    assert (desk.image_size, desk.n_patches, desk.n_tokens) == (64, 64, 68)
    full = config.encoder_preset("vit-b16")
    assert (full.n_patches, full.d_head, full.cross_attn_layers) == (196, 64, (7, 10, 12))
    assert config.training_preset("vit-b16").learning_rate == 1e-6
    with pytest.raises(ConfigError):
        config.encoder_preset("huge")


def test_invalid_shapes_become_config_errors():
    with pytest.raises(ConfigError, match="divisible"):
        config.encoder_preset("desk", image_size=60)
    with pytest.raises(ConfigError, match="cross_attn_layers"):
        config.encoder_preset("desk", cross_attn_layers=(7,))
    with pytest.raises(ConfigError):
        config.training_preset("desk", batch_size=1)
    with pytest.raises(ConfigError, match="grid"):
        config.encoder_preset("desk", image_size=8, patch_size=8)
    assert config.encoder_preset("desk", image_size=16, patch_size=8).grid == 2


def test_cross_layers_parse_from_text():
    assert config.encoder_preset("desk", cross_attn_layers="6, 3,5").cross_attn_layers == (3, 5, 6)
    assert config.encoder_preset("desk", cross_attn_layers="").cross_attn_layers == ()


def test_parse_config_text():
    values = config.parse_config_text("# comment\nepochs = 3  # inline\n\npreset=gradcheck\n")
    assert values == {"epochs": "3", "preset": "gradcheck"}
    with pytest.raises(ConfigError, match="line 2"):
        config.parse_config_text("epochs = 3\nepochs = 4\n")
    with pytest.raises(ConfigError, match="line 1"):
        config.parse_config_text("epochs 3\n")


def test_config_file_round_trip(tmp_path, tiny_encoder, tiny_training):
    path = tmp_path / "run.cfg"
    path.write_text(config.render_config_text(tiny_encoder, tiny_training), encoding="utf-8")
    assert config.load_config_file(path) == (tiny_encoder, tiny_training)


def test_config_file_routes_keys(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("preset = gradcheck\nmargin = 0.5\nuse_global_loss = false\n", encoding="utf-8")
    encoder, training = config.load_config_file(path)
    assert encoder.d_model == 32
    assert training.margin == 0.5 and not training.use_global_loss
    assert training.batch_size == 8


def test_config_file_errors(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("colour = blue\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="colour"):
        config.load_config_file(path)
    with pytest.raises(ConfigError):
        config.load_config_file(tmp_path / "missing.cfg")
