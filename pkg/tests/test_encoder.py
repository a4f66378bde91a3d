from __future__ import annotations

import numpy as np
import pytest

from sketchseg import config
from sketchseg.core import functional as F
from sketchseg.core.errors import DimensionError
from sketchseg.core.tensor import Tensor
from sketchseg.models.domain import SketchBitmap
from sketchseg.vision.encoder import (
    TokenBatch,
    assemble_tokens,
    attention,
    encode_sketch,
    forward_category,
    forward_dual_path,
    sketch_patches,
    vv_attention,
    vv_logits,
)
from sketchseg.vision.params import block_prefix, init_params


def _leaves(arrays):
    return {name: Tensor(np.asarray(arr, dtype=np.float64), name=name) for name, arr in arrays.items()}


def test_vv_attention_single_token_is_identity(rng):
    v = rng.standard_normal((1, 4))
    np.testing.assert_allclose(vv_attention(v).numpy(), v, atol=1e-6)


def test_vv_attention_identical_tokens(rng):
    row = rng.standard_normal((1, 4))
    v = np.vstack([row, row])
    np.testing.assert_allclose(vv_attention(v).numpy(), v, atol=1e-6)


def test_vv_weights_are_row_stochastic_with_symmetric_logits(rng):
    for _ in range(1000):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 9))
        v = rng.standard_normal((n, d))
        logits = vv_logits(v).numpy()
        np.testing.assert_allclose(logits, logits.T, atol=1e-6)
        np.testing.assert_allclose(F.softmax_rows(logits).numpy().sum(axis=1), 1.0, atol=1e-6)


def _layer_norm(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def test_one_layer_matches_hand_computation(rng):
    cfg = config.encoder_preset(
        "desk", image_size=4, patch_size=2, d_model=4, d_joint=4, n_layers=1, n_heads=1,
        n_prompts=1, cross_attn_layers=(),
    )
    arrays = dict(init_params(cfg, seed=0).arrays)
    b = block_prefix(1)
    d = 4
    # Zero q/k: uniform attention. Identity v/out. Zero FFN output.
    for name in ("q", "k"):
        arrays[f"{b}.attn.{name}.weight"] = np.zeros((d, d))
    arrays[f"{b}.attn.v.weight"] = np.eye(d)
    arrays[f"{b}.attn.out.weight"] = np.eye(d)
    arrays[f"{b}.mlp.fc2.weight"] = np.zeros_like(arrays[f"{b}.mlp.fc2.weight"])
    arrays["proj"] = np.eye(d)
    x = rng.standard_normal((6, d))
    out = forward_dual_path(TokenBatch(x=Tensor(x), n_patches=4, n_prompts=1), _leaves(arrays), cfg)

    ln = _layer_norm(x, cfg.ln_eps)
    expected_main = x + np.tile(ln.mean(axis=0), (6, 1))
    logits = ln @ ln.T / np.sqrt(d)
    weights = np.exp(logits - logits.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    expected_vv = x + weights @ ln
    np.testing.assert_allclose(out.main[0].numpy(), x)
    np.testing.assert_allclose(out.main[1].numpy(), expected_main, atol=1e-10)
    np.testing.assert_allclose(out.vv[0].numpy(), expected_vv, atol=1e-10)
    np.testing.assert_allclose(out.vst.numpy(), expected_vv[0] / np.linalg.norm(expected_vv[0]), atol=1e-10)
    np.testing.assert_allclose(out.patches.numpy()[0], expected_vv[1] / np.linalg.norm(expected_vv[1]), atol=1e-10)


def test_token_layout(tiny_encoder):
    cfg = tiny_encoder.model_copy(update={"n_prompts": 3})
    params = init_params(cfg, seed=0)
    tokens = assemble_tokens(np.zeros((cfg.n_patches, 64)), params.leaves(), cfg)
    assert cfg.n_patches == 4
    assert tokens.n_tokens == 8
    assert list(tokens.patch_slots) == [1, 2, 3, 4]
    assert list(tokens.prompt_slots) == [5, 6, 7]
    expected = params["patch_proj.bias"] + params["pos_embed"][1:]
    np.testing.assert_allclose(tokens.x.numpy()[1:5], expected, atol=1e-7)
    np.testing.assert_array_equal(tokens.x.numpy()[5], params["prompt.0"])
    np.testing.assert_allclose(tokens.x.numpy()[0], params["vst"] + params["pos_embed"][0], atol=1e-7)

    bare = tiny_encoder.model_copy(update={"n_prompts": 0})
    tokens = assemble_tokens(np.zeros((4, 64)), init_params(bare, seed=0).leaves(), bare)
    assert tokens.n_tokens == 5


def test_assemble_tokens_rejects_wrong_patch_count(tiny_encoder):
    leaves = init_params(tiny_encoder, seed=0).leaves()
    with pytest.raises(DimensionError):
        assemble_tokens(np.zeros((5, 64)), leaves, tiny_encoder)
    with pytest.raises(DimensionError):
        sketch_patches(SketchBitmap(np.zeros((8, 8))), tiny_encoder)


def test_output_shapes_and_unit_norms(tiny_encoder, tiny_split):
    leaves = init_params(tiny_encoder, seed=0).leaves()
    out = encode_sketch(tiny_split.items[0].bitmap, leaves, tiny_encoder)
    assert out.vst.shape == (tiny_encoder.d_joint,)
    assert out.patches.shape == (tiny_encoder.n_patches, tiny_encoder.d_joint)
    assert len(out.main) == tiny_encoder.n_layers + 1 and out.n_layers == tiny_encoder.n_layers
    assert np.linalg.norm(out.vst.numpy()) == pytest.approx(1.0, abs=1e-5)
    np.testing.assert_allclose(np.linalg.norm(out.patches.numpy(), axis=1), 1.0, atol=1e-5)


def test_both_paths_start_from_the_same_tokens(tiny_encoder, tiny_split):
    leaves = init_params(tiny_encoder, seed=0).leaves()
    tokens = assemble_tokens(sketch_patches(tiny_split.items[0].bitmap, tiny_encoder), leaves, tiny_encoder)
    out = forward_dual_path(tokens, leaves, tiny_encoder)
    np.testing.assert_array_equal(out.main[0].numpy(), tokens.x.numpy())
    b = block_prefix(1)
    from sketchseg.vision.encoder import vv_multihead
    from sketchseg.core.functional import layer_norm

    ln = layer_norm(tokens.x, leaves[f"{b}.vv_ln.gamma"], leaves[f"{b}.vv_ln.beta"], eps=tiny_encoder.ln_eps)
    expected = tokens.x.numpy() + vv_multihead(ln, leaves, b, tiny_encoder).numpy()
    np.testing.assert_allclose(out.vv[0].numpy(), expected, atol=1e-6)


def test_patch_permutation_equivariance(tiny_encoder, rng):
    cfg = tiny_encoder.model_copy(update={"n_prompts": 0})
    arrays = dict(init_params(cfg, seed=0).arrays)
    arrays["pos_embed"] = np.zeros_like(arrays["pos_embed"])
    leaves = _leaves(arrays)
    patches = rng.uniform(0, 1, (cfg.n_patches, 64))
    perm = np.array([2, 0, 3, 1])
    base = forward_dual_path(assemble_tokens(patches, leaves, cfg), leaves, cfg).patches.numpy()
    moved = forward_dual_path(assemble_tokens(patches[perm], leaves, cfg), leaves, cfg).patches.numpy()
    np.testing.assert_allclose(moved, base[perm], atol=1e-10)


def test_category_pass_returns_one_vct_per_cross_layer(tiny_encoder, tiny_split, text_encoder):
    leaves = init_params(tiny_encoder, seed=0).leaves()
    tokens = assemble_tokens(sketch_patches(tiny_split.items[0].bitmap, tiny_encoder), leaves, tiny_encoder)
    cct = text_encoder.category_tokens(["circle"])[0]
    out = forward_category(tokens, cct, leaves, tiny_encoder)
    assert out.layers == [1, 2]
    for vct in out.vct.values():
        assert np.linalg.norm(vct.numpy()) == pytest.approx(1.0, abs=1e-5)


def test_category_pass_without_cross_layers_equals_dual_path(tiny_encoder, tiny_split, text_encoder):
    cfg = tiny_encoder.model_copy(update={"cross_attn_layers": ()})
    leaves = init_params(cfg, seed=0).leaves()
    tokens = assemble_tokens(sketch_patches(tiny_split.items[0].bitmap, cfg), leaves, cfg)
    cct = text_encoder.category_tokens(["box"])[0]
    out = forward_category(tokens, cct, leaves, cfg)
    assert out.layers == [cfg.n_layers]
    np.testing.assert_array_equal(out.vct[cfg.n_layers].numpy(), forward_dual_path(tokens, leaves, cfg).vst.numpy())


def test_category_token_dimension_is_checked(tiny_encoder, tiny_split):
    leaves = init_params(tiny_encoder, seed=0).leaves()
    tokens = assemble_tokens(sketch_patches(tiny_split.items[0].bitmap, tiny_encoder), leaves, tiny_encoder)
    with pytest.raises(DimensionError):
        forward_category(tokens, np.ones(tiny_encoder.d_joint + 1), leaves, tiny_encoder)


def test_zero_query_gives_uniform_attention(tiny_encoder, rng):
    params = init_params(tiny_encoder, seed=0)
    leaves = _leaves(params.arrays)
    b = block_prefix(1)
    x = rng.standard_normal((6, tiny_encoder.d_model))
    query = Tensor(np.zeros((1, tiny_encoder.d_model)))
    out = attention(Tensor(x), leaves, b, tiny_encoder, query=query).numpy()
    v = x @ params[f"{b}.attn.v.weight"] + params[f"{b}.attn.v.bias"]
    expected = v.mean(axis=0) @ params[f"{b}.attn.out.weight"] + params[f"{b}.attn.out.bias"]
    np.testing.assert_allclose(out, np.tile(expected, (6, 1)), atol=1e-6)
