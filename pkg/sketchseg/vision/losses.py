from __future__ import annotations

from typing import Literal, Mapping, Sequence

import numpy as np

from sketchseg.core import functional as F
from sketchseg.core.errors import ContractError, DimensionError
from sketchseg.core.tensor import Tensor, as_tensor
from sketchseg.models.schemas import NegativeMining

DisentangleMode = Literal["threshold", "weight"]


def mine_negatives(distances: np.ndarray, mining: NegativeMining = "hardest-closest") -> np.ndarray:
    """Column index of the negative for every anchor row, never the diagonal.

    hardest-closest picks the nearest non-matching candidate; the literal
    variant picks the farthest one.
    """
    d = np.array(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DimensionError("negative mining needs a square distance matrix", d.shape)
    if d.shape[0] < 2:
        raise ContractError("triplet mining needs at least 2 candidates")
    if mining == "hardest-closest":
        np.fill_diagonal(d, np.inf)
        return np.argmin(d, axis=1)
    if mining == "paper-literal-most-dissimilar":
        np.fill_diagonal(d, -np.inf)
        return np.argmax(d, axis=1)
    raise ContractError(f"unknown negative mining rule {mining!r}")


def _triplet(anchors: Tensor, positives: Tensor, margin: float, mining: NegativeMining) -> Tensor:
    dist = F.pairwise_distances(anchors, positives)
    n = dist.shape[0]
    rows = np.arange(n)
    negatives = mine_negatives(dist.numpy(), mining)
    d_pos = dist[rows, rows]
    d_neg = dist[rows, negatives]
    return F.relu(d_pos - d_neg + margin).mean()


def triplet_loss_global(vst, cst, margin: float = 0.3, mining: NegativeMining = "hardest-closest") -> Tensor:
    """Mean hinge max(|VST_i - CST_i| - |VST_i - CST_j| + m, 0) with j mined in the batch."""
    vst, cst = as_tensor(vst), as_tensor(cst)
    if vst.ndim != 2 or vst.shape != cst.shape:
        raise DimensionError("scene and caption batches are not aligned", vst.shape, cst.shape)
    if vst.shape[0] < 2:
        raise ContractError(f"triplet loss needs a batch of at least 2, got {vst.shape[0]}")
    return _triplet(vst, cst, margin, mining)


def triplet_loss_category(
    vct_per_layer: Mapping[int, Tensor],
    ccts,
    margin: float = 0.3,
    mining: NegativeMining = "hardest-closest",
) -> Tensor:
    """Category triplet averaged uniformly over layers and categories; 0 with fewer than 2 categories.

    `vct_per_layer[l]` is [N_c, d_joint] with row c the VCT of category c.
    """
    ccts = as_tensor(ccts)
    if ccts.ndim != 2 or ccts.shape[0] < 2:
        return Tensor(np.zeros((), dtype=ccts.dtype))
    if not vct_per_layer:
        raise ContractError("category triplet loss needs at least one readout layer")
    terms = []
    for layer in sorted(vct_per_layer):
        vct = as_tensor(vct_per_layer[layer])
        if vct.shape != ccts.shape:
            raise DimensionError(f"VCT rows of layer {layer} do not match the category tokens", vct.shape, ccts.shape)
        terms.append(_triplet(vct, ccts, margin, mining))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def category_similarity_maps(h_patches, ccts) -> Tensor:
    """Cosine similarity [K, N_c] between unit patch embeddings and unit category tokens."""
    h_patches, ccts = as_tensor(h_patches), as_tensor(ccts)
    if h_patches.ndim != 2 or ccts.ndim != 2 or h_patches.shape[1] != ccts.shape[1]:
        raise DimensionError("patch embeddings and category tokens differ in width", h_patches.shape, ccts.shape)
    return F.matmul(h_patches, ccts.T)


def pixel_map(patch_column, grid: int, height: int, width: int) -> Tensor:
    """Patch-level scores [K] -> grid -> bicubic upscale to [height, width]."""
    patch_column = as_tensor(patch_column)
    if patch_column.shape != (grid * grid,):
        raise DimensionError("patch scores do not fill the grid", patch_column.shape, (grid * grid,))
    return F.bicubic_resize(patch_column.reshape(grid, grid), height, width)


def disentangle(map_c, intensity, tau, steepness: float = 50.0, mode: DisentangleMode = "threshold") -> Tensor:
    """Keep the ink of one category: intensity * m * sigmoid(k (m - tau)), m = map clamped to [0, 1]."""
    map_c, intensity = as_tensor(map_c), as_tensor(intensity)
    if map_c.shape != intensity.shape:
        raise DimensionError("similarity map and sketch differ in size", map_c.shape, intensity.shape)
    clamped = F.clip(map_c, 0.0, 1.0)
    if mode == "weight":
        return intensity * clamped
    if mode != "threshold":
        raise ContractError(f"unknown disentangle mode {mode!r}")
    gate = F.sigmoid((clamped - as_tensor(tau)) * steepness)
    return intensity * clamped * gate


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    width = rows[0].shape[-1]
    return F.concat([r.reshape(1, width) for r in rows], axis=0)


__all__ = [
    "category_similarity_maps",
    "disentangle",
    "mine_negatives",
    "pixel_map",
    "stack_rows",
    "triplet_loss_category",
    "triplet_loss_global",
]
