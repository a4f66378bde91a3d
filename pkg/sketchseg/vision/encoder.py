"""Dual-path vision transformer.

The main path is a pre-LN transformer (LN -> MHSA -> residual, LN -> MLP ->
residual). Beside it runs a value-value path: at layer l it reads the MAIN
path's layer input x_l, applies its own LN and a multi-head attention built
only from the (shared, frozen) value projection, and adds the result to a
running stream s that starts at x_1. Scene and patch embeddings are read
from that stream.

The category pass is the same network where, in every cross-attention
layer, the query of all positions in both paths is the caption category
token pushed through that layer's `cross_q` projection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from sketchseg.core import functional as F
from sketchseg.core.errors import DimensionError
from sketchseg.core.tensor import Tensor, as_tensor
from sketchseg.models.domain import SketchBitmap, TextToken
from sketchseg.models.schemas import EncoderConfig
from sketchseg.vision.params import block_prefix

Leaves = Mapping[str, Tensor]


@dataclass(frozen=True)
class TokenBatch:
    """Token matrix X [1+K+S, d_model]: VST at row 0, patches 1..K, prompts K+1..K+S."""

    x: Tensor
    n_patches: int
    n_prompts: int

    def __post_init__(self) -> None:
        expected = 1 + self.n_patches + self.n_prompts
        if self.x.ndim != 2 or self.x.shape[0] != expected:
            raise DimensionError("token batch does not hold 1+K+S rows", self.x.shape, (expected,))

    @property
    def n_tokens(self) -> int:
        return self.x.shape[0]

    @property
    def vst_slot(self) -> int:
        return 0

    @property
    def patch_slots(self) -> range:
        return range(1, 1 + self.n_patches)

    @property
    def prompt_slots(self) -> range:
        return range(1 + self.n_patches, self.n_tokens)


@dataclass
class DualPathOutput:
    main: List[Tensor]  # x_1 .. x_{L+1}
    vv: List[Tensor]  # s_1 .. s_L
    vst: Tensor  # [d_joint], unit norm
    patches: Tensor  # [K, d_joint], unit rows
    n_patches: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.vv)


@dataclass
class CategoryOutput:
    vct: Dict[int, Tensor] = field(default_factory=dict)  # layer -> [d_joint]

    @property
    def layers(self) -> List[int]:
        return sorted(self.vct)


def _linear(x: Tensor, leaves: Leaves, prefix: str) -> Tensor:
    return F.matmul(x, leaves[f"{prefix}.weight"]) + leaves[f"{prefix}.bias"]


def _project(rows: Tensor, leaves: Leaves) -> Tensor:
    return F.l2_normalize(F.matmul(rows, leaves["proj"]), axis=-1)


def _broadcast_rows(row: Tensor, n: int) -> Tensor:
    ones = Tensor(np.ones((n, 1), dtype=row.dtype))
    return F.matmul(ones, row)


# ---------------- Tokens ----------------


def assemble_tokens(patches, leaves: Leaves, cfg: EncoderConfig) -> TokenBatch:
    """Project flattened patches, add positions to VST and patch slots, append the prompts."""
    patches = as_tensor(patches)
    p2 = cfg.patch_size * cfg.patch_size
    if patches.ndim != 2 or patches.shape != (cfg.n_patches, p2):
        raise DimensionError("patch table does not match the encoder config", patches.shape, (cfg.n_patches, p2))
    d = cfg.d_model
    embedded = _linear(patches, leaves, "patch_proj")
    head = F.concat([leaves["vst"].reshape(1, d), embedded], axis=0) + leaves["pos_embed"]
    if cfg.n_prompts == 0:
        x = head
    else:
        prompts = [leaves[f"prompt.{i}"].reshape(1, d) for i in range(cfg.n_prompts)]
        x = F.concat([head] + prompts, axis=0)
    return TokenBatch(x=x, n_patches=cfg.n_patches, n_prompts=cfg.n_prompts)


def sketch_patches(bitmap, cfg: EncoderConfig) -> Tensor:
    """Patch table of a bitmap or of a differentiable [h, w] intensity field."""
    intensity = bitmap.intensity if isinstance(bitmap, SketchBitmap) else bitmap
    intensity = as_tensor(intensity)
    if intensity.shape != (cfg.image_size, cfg.image_size):
        raise DimensionError("sketch size does not match the encoder config",
                             intensity.shape, (cfg.image_size, cfg.image_size))
    return F.patchify(intensity, cfg.patch_size)


# ---------------- Attention ----------------


def vv_logits(v) -> Tensor:
    v = as_tensor(v)
    return F.matmul(v, v.T) / math.sqrt(v.shape[1])


def vv_attention(v) -> Tensor:
    """softmax(V V^T / sqrt(d_head)) V for one head."""
    v = as_tensor(v)
    return F.multi_head_attention(v, v, v, n_heads=1, scale=1.0 / math.sqrt(v.shape[1]))


def _out(merged: Tensor, leaves: Leaves, prefix: str, n: int) -> Tensor:
    """Output projection; a single query row is shared by all n positions."""
    out = _linear(merged, leaves, f"{prefix}.attn.out")
    return out if out.shape[0] == n else _broadcast_rows(out, n)


def attention(x: Tensor, leaves: Leaves, prefix: str, cfg: EncoderConfig, query: Optional[Tensor] = None) -> Tensor:
    """Standard q-k multi-head self-attention; `query` [1, d_model] replaces every position's query."""
    q = _linear(x, leaves, f"{prefix}.attn.q") if query is None else query
    k = _linear(x, leaves, f"{prefix}.attn.k")
    v = _linear(x, leaves, f"{prefix}.attn.v")
    merged = F.multi_head_attention(q, k, v, cfg.n_heads, 1.0 / math.sqrt(cfg.d_head))
    return _out(merged, leaves, prefix, x.shape[0])


def vv_multihead(x: Tensor, leaves: Leaves, prefix: str, cfg: EncoderConfig, query: Optional[Tensor] = None) -> Tensor:
    """Value-value attention with the block's own V and output projections."""
    v = _linear(x, leaves, f"{prefix}.attn.v")
    merged = F.multi_head_attention(v if query is None else query, v, v, cfg.n_heads, 1.0 / math.sqrt(cfg.d_head))
    return _out(merged, leaves, prefix, x.shape[0])


def _mlp(x: Tensor, leaves: Leaves, prefix: str) -> Tensor:
    return _linear(F.quick_gelu(_linear(x, leaves, f"{prefix}.mlp.fc1")), leaves, f"{prefix}.mlp.fc2")


def _ln(x: Tensor, leaves: Leaves, name: str, cfg: EncoderConfig) -> Tensor:
    return F.layer_norm(x, leaves[f"{name}.gamma"], leaves[f"{name}.beta"], eps=cfg.ln_eps)


# ---------------- Forward passes ----------------


def _run(
    tokens: TokenBatch,
    leaves: Leaves,
    cfg: EncoderConfig,
    queries: Mapping[int, Tensor],
    stream_depth: Optional[int] = None,
):
    """Both paths layer by layer.

    With `stream_depth` set, only the value-value stream up to that layer is
    wanted: the run stops there, skipping the main block of that layer.
    """
    x = tokens.x
    s = x
    main: List[Tensor] = [x]
    vv: List[Tensor] = []
    for layer in range(1, (stream_depth or cfg.n_layers) + 1):
        b = block_prefix(layer)
        query = queries.get(layer)
        if cfg.use_vv_path:
            s = s + vv_multihead(_ln(x, leaves, f"{b}.vv_ln", cfg), leaves, b, cfg, query)
            vv.append(s)
            if layer == stream_depth:
                break
        x = x + attention(_ln(x, leaves, f"{b}.ln1", cfg), leaves, b, cfg, query)
        x = x + _mlp(_ln(x, leaves, f"{b}.ln2", cfg), leaves, b)
        main.append(x)
        if not cfg.use_vv_path:
            vv.append(x)
    return main, vv


def forward_dual_path(tokens: TokenBatch, leaves: Leaves, cfg: EncoderConfig) -> DualPathOutput:
    main, vv = _run(tokens, leaves, cfg, {})
    final = vv[-1]
    vst = _project(final[0:1], leaves).reshape(cfg.d_joint)
    patches = _project(final[1:1 + tokens.n_patches], leaves)
    return DualPathOutput(main=main, vv=vv, vst=vst, patches=patches, n_patches=tokens.n_patches)


def _cct_row(cct, cfg: EncoderConfig) -> Tensor:
    vector = cct.vector if isinstance(cct, TextToken) else cct
    vector = as_tensor(vector)
    if vector.shape not in ((cfg.d_joint,), (1, cfg.d_joint)):
        raise DimensionError("category token does not live in the joint space", vector.shape, (cfg.d_joint,))
    return vector.reshape(1, cfg.d_joint)


def forward_category(
    tokens: TokenBatch,
    cct,
    leaves: Leaves,
    cfg: EncoderConfig,
    readout_layers: Optional[Sequence[int]] = None,
    cross: bool = True,
) -> CategoryOutput:
    """VCT (projected, unit norm) at every readout layer; defaults to the cross-attention layers."""
    row = _cct_row(cct, cfg)
    queries: Dict[int, Tensor] = {}
    if cross:
        for layer in cfg.cross_attn_layers:
            b = block_prefix(layer)
            queries[layer] = _linear(row, leaves, f"{b}.cross_q")
    layers = tuple(readout_layers) if readout_layers else (cfg.cross_attn_layers or (cfg.n_layers,))
    bad = [l for l in layers if not 1 <= l <= cfg.n_layers]
    if bad:
        raise DimensionError(f"readout layers {bad} outside [1, {cfg.n_layers}]")
    _, vv = _run(tokens, leaves, cfg, queries, stream_depth=max(layers))
    out = CategoryOutput()
    for layer in layers:
        out.vct[layer] = _project(vv[layer - 1][0:1], leaves).reshape(cfg.d_joint)
    return out


def encode_sketch(bitmap, leaves: Leaves, cfg: EncoderConfig) -> DualPathOutput:
    return forward_dual_path(assemble_tokens(sketch_patches(bitmap, cfg), leaves, cfg), leaves, cfg)


__all__ = [
    "CategoryOutput",
    "DualPathOutput",
    "TokenBatch",
    "assemble_tokens",
    "attention",
    "encode_sketch",
    "forward_category",
    "forward_dual_path",
    "sketch_patches",
    "vv_attention",
    "vv_logits",
    "vv_multihead",
]
