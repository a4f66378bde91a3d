from __future__ import annotations

import functools
import math
from typing import Sequence

import numpy as np

from sketchseg.core.errors import ContractError, DimensionError
from sketchseg.core.tensor import (
    Clip,
    Concat,
    LayerNorm,
    MatMul,
    MultiHeadAttention,
    Norm,
    Relu,
    Sigmoid,
    SoftmaxRows,
    Sqrt,
    Tensor,
    as_tensor,
)

BICUBIC_A = -0.5


def matmul(a, b) -> Tensor:
    return MatMul.apply(as_tensor(a), as_tensor(b))


def softmax_rows(a) -> Tensor:
    return SoftmaxRows.apply(as_tensor(a))


def multi_head_attention(q, k, v, n_heads: int, scale: float) -> Tensor:
    """Scaled dot-product attention per head in one graph node; q [m, d], k and v [n, d] -> [m, d]."""
    return MultiHeadAttention.apply(as_tensor(q), as_tensor(k), as_tensor(v), n_heads=n_heads, scale=scale)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x = as_tensor(x)
    return LayerNorm.apply(x, as_tensor(gamma), as_tensor(beta), eps=eps)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*[as_tensor(p) for p in parts], axis=axis)


def sqrt(x) -> Tensor:
    return Sqrt.apply(as_tensor(x))


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(as_tensor(x))


def relu(x) -> Tensor:
    return Relu.apply(as_tensor(x))


def clip(x, low: float, high: float) -> Tensor:
    return Clip.apply(as_tensor(x), low=low, high=high)


def quick_gelu(x: Tensor) -> Tensor:
    return x * sigmoid(x * 1.702)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return x / sqrt((x * x).sum(axis=axis, keepdims=True) + eps)


def pairwise_distances(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Euclidean distances between every row of `a` [n, d] and every row of `b` [m, d] -> [n, m]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError("pairwise_distances needs row sets of equal width", a.shape, b.shape)
    diff = a.reshape(a.shape[0], 1, a.shape[1]) - b.reshape(1, b.shape[0], b.shape[1])
    return Norm.apply(diff, eps=eps)


def _cubic_kernel(t: float, a: float = BICUBIC_A) -> float:
    t = abs(t)
    if t <= 1.0:
        return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    if t < 2.0:
        return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    return 0.0


@functools.lru_cache(maxsize=64)
def bicubic_weights(n_in: int, n_out: int) -> np.ndarray:
    """Resampling matrix [n_out, n_in]: Catmull-Rom taps, pixel-center alignment, clamped edges."""
    if n_in < 2 or n_out < 1:
        raise ContractError(f"bicubic resize needs n_in >= 2 and n_out >= 1, got {n_in} -> {n_out}")
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = math.floor(src)
        for offset in (-1, 0, 1, 2):
            idx = base + offset
            weights[i, min(max(idx, 0), n_in - 1)] += _cubic_kernel(src - idx)
    weights.setflags(write=False)
    return weights


def bicubic_resize(src, out_h: int, out_w: int) -> Tensor:
    """Bicubic resampling of a 2-D field; linear in `src`, so it differentiates like two matmuls."""
    src = as_tensor(src)
    if src.ndim != 2:
        raise DimensionError("bicubic_resize expects a 2-D field", src.shape)
    h, w = src.shape
    wy = Tensor(bicubic_weights(h, out_h), dtype=src.dtype)
    wx = Tensor(bicubic_weights(w, out_w).T, dtype=src.dtype)
    return matmul(matmul(wy, src), wx)


def patchify(image, patch: int) -> Tensor:
    """[h, w] -> [K, patch*patch], patches and their pixels both row-major."""
    image = as_tensor(image)
    if image.ndim != 2:
        raise DimensionError("patchify expects a 2-D field", image.shape)
    h, w = image.shape
    if patch < 1 or h % patch or w % patch:
        raise DimensionError(f"image is not divisible into {patch}x{patch} patches", image.shape)
    gh, gw = h // patch, w // patch
    blocks = image.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3)
    return blocks.reshape(gh * gw, patch * patch)


def unpatchify(patches, patch: int, height: int, width: int) -> Tensor:
    patches = as_tensor(patches)
    gh, gw = height // patch, width // patch
    if patches.shape != (gh * gw, patch * patch):
        raise DimensionError("patch table does not tile the image", patches.shape, (gh * gw, patch * patch))
    blocks = patches.reshape(gh, gw, patch, patch).transpose(0, 2, 1, 3)
    return blocks.reshape(height, width)


__all__ = [
    "BICUBIC_A",
    "bicubic_resize",
    "bicubic_weights",
    "clip",
    "concat",
    "l2_normalize",
    "layer_norm",
    "matmul",
    "multi_head_attention",
    "pairwise_distances",
    "patchify",
    "quick_gelu",
    "relu",
    "sigmoid",
    "softmax_rows",
    "sqrt",
    "unpatchify",
]
