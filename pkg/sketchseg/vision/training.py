"""Two-level objective and one optimizer step.

Scene level: triplet between the scene token of every sketch and the caption
embeddings of the batch. Category level: each category's similarity map is
upscaled, gated by the learnable threshold, multiplied into the sketch, and
the masked sketch is re-encoded with the category token as the cross-attention
query; the category token read at the readout layers is the anchor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from sketchseg.core.errors import DimensionError, NumericError
from sketchseg.core.tensor import Tensor, backward
from sketchseg.models.domain import DatasetItem
from sketchseg.models.schemas import EncoderConfig, TrainingConfig, TrainingLogRecord
from sketchseg.services.text_embedding import TextEncoder
from sketchseg.vision.encoder import assemble_tokens, encode_sketch, forward_category, sketch_patches
from sketchseg.vision.losses import (
    category_similarity_maps,
    disentangle,
    pixel_map,
    stack_rows,
    triplet_loss_category,
    triplet_loss_global,
)
from sketchseg.vision.optim import AdamW
from sketchseg.vision.params import EncoderParams

logger = logging.getLogger("sketchseg.training")

TAU = "tau"
TAU_BOUNDS = (0.01, 0.99)


@dataclass(frozen=True)
class TrainItem:
    """One sketch with its frozen text targets."""

    sketch_id: str
    intensity: np.ndarray  # [h, w]
    cst: np.ndarray  # [d_joint]
    ccts: np.ndarray  # [N_c, d_joint]

    @classmethod
    def from_dataset_item(cls, item: DatasetItem, text: TextEncoder) -> "TrainItem":
        cst = text.caption_token(item.caption).vector
        ccts = np.stack([t.vector for t in text.category_tokens(item.caption)])
        return cls(item.sketch_id, item.bitmap.intensity, cst, ccts)


@dataclass
class TrainState:
    params: EncoderParams
    tau: float
    optimizer: AdamW
    step: int = 0

    def leaves(self) -> Dict[str, Tensor]:
        leaves = self.params.leaves()
        dtype = self.params["proj"].dtype
        leaves[TAU] = Tensor(np.asarray(self.tau, dtype=dtype), name=TAU)
        return leaves

    def trainable_names(self) -> List[str]:
        return sorted(self.params.trainable | {TAU})


@dataclass(frozen=True)
class LossTerms:
    total: Tensor
    loss_global: Tensor
    loss_category: Tensor


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    loss_global: float
    loss_category: float
    tau: float

    def log_record(self, step: int, lr: float) -> TrainingLogRecord:
        return TrainingLogRecord(step=step, loss_global=self.loss_global,
                                 loss_category=self.loss_category, tau=self.tau, lr=lr)


def readout_layers(encoder: EncoderConfig, training: TrainingConfig) -> Tuple[int, ...]:
    """Layers whose VCT enters the category loss: the cross-attention layers, or only the last one."""
    if training.multi_layer_loss and encoder.cross_attn_layers:
        return tuple(encoder.cross_attn_layers)
    return (encoder.n_layers,)


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


def category_term(
    item: TrainItem,
    h_patches: Tensor,
    leaves: Mapping[str, Tensor],
    encoder: EncoderConfig,
    training: TrainingConfig,
) -> Tensor:
    n_categories = item.ccts.shape[0]
    if n_categories < 2:
        return _zero(h_patches)
    maps = category_similarity_maps(h_patches, item.ccts.astype(h_patches.dtype))
    h, w = item.intensity.shape
    layers = readout_layers(encoder, training)
    per_layer: Dict[int, List[Tensor]] = {layer: [] for layer in layers}
    intensity = Tensor(item.intensity, dtype=h_patches.dtype)
    for c in range(n_categories):
        upscaled = pixel_map(maps[:, c], encoder.grid, h, w)
        masked = disentangle(upscaled, intensity, leaves[TAU], training.threshold_gate_steepness,
                             training.disentangle_mode)
        tokens = assemble_tokens(sketch_patches(masked, encoder), leaves, encoder)
        out = forward_category(tokens, item.ccts[c].astype(h_patches.dtype), leaves, encoder,
                               readout_layers=layers, cross=training.use_cross_attention)
        for layer in layers:
            per_layer[layer].append(out.vct[layer])
    vcts = {layer: stack_rows(rows) for layer, rows in per_layer.items()}
    return triplet_loss_category(vcts, item.ccts.astype(h_patches.dtype), training.margin, training.negative_mining)


def model_loss(
    leaves: Mapping[str, Tensor],
    items: Sequence[TrainItem],
    encoder: EncoderConfig,
    training: TrainingConfig,
) -> LossTerms:
    """Total loss L = L_global + L_category for one batch; `leaves` must include `tau`."""
    if not items:
        raise DimensionError("empty training batch")
    encoded = [encode_sketch(item.intensity, leaves, encoder) for item in items]
    like = encoded[0].vst

    if training.use_global_loss:
        try:
            vst = stack_rows([e.vst for e in encoded])
            cst = np.stack([item.cst for item in items]).astype(like.dtype)
            loss_global = triplet_loss_global(vst, cst, training.margin, training.negative_mining)
        except NumericError as e:
            raise NumericError(f"non-finite scene loss: {e}", term="loss_global") from e
    else:
        loss_global = _zero(like)

    loss_category = _zero(like)
    if training.use_category_loss:
        try:
            for item, enc in zip(items, encoded):
                loss_category = loss_category + category_term(item, enc.patches, leaves, encoder, training)
            loss_category = loss_category * (1.0 / len(items))
        except NumericError as e:
            raise NumericError(f"non-finite category loss: {e}", term="loss_category") from e

    return LossTerms(total=loss_global + loss_category, loss_global=loss_global, loss_category=loss_category)


def train_step(
    state: TrainState,
    items: Sequence[TrainItem],
    encoder: EncoderConfig,
    training: TrainingConfig,
) -> Tuple[TrainState, LossBreakdown]:
    """One AdamW step on the trainable set; frozen arrays are passed through untouched."""
    leaves = state.leaves()
    trainable = {name: leaves[name] for name in state.trainable_names()}
    terms = model_loss(leaves, items, encoder, training)
    total = terms.total.item()
    if not np.isfinite(total):
        raise NumericError("non-finite total loss", term="total")
    grads = backward(terms.total, trainable)
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient", term=f"gradient of {name}")

    arrays = {name: state.params[name] for name in state.params.trainable}
    arrays[TAU] = np.asarray(state.tau, dtype=state.params["proj"].dtype)
    updated = state.optimizer.step(arrays, grads)
    tau = np.clip(updated.pop(TAU), *TAU_BOUNDS).item()
    new_state = TrainState(
        params=state.params.replace(updated),
        tau=tau,
        optimizer=state.optimizer,
        step=state.step + 1,
    )
    breakdown = LossBreakdown(
        total=total,
        loss_global=terms.loss_global.item(),
        loss_category=terms.loss_category.item(),
        tau=tau,
    )
    logger.debug("Training step", extra={"event": "train_step", "step": new_state.step, "loss": total})
    return new_state, breakdown


def new_train_state(params: EncoderParams, training: TrainingConfig) -> TrainState:
    optimizer = AdamW(
        lr=training.learning_rate,
        beta1=training.beta1,
        beta2=training.beta2,
        eps=training.adam_eps,
        weight_decay=training.weight_decay,
    )
    # tau is held at the precision of the parameters it trains with
    tau = np.asarray(training.threshold_init, dtype=params["proj"].dtype).item()
    return TrainState(params=params, tau=tau, optimizer=optimizer)


__all__ = [
    "LossBreakdown",
    "LossTerms",
    "TAU",
    "TAU_BOUNDS",
    "TrainItem",
    "TrainState",
    "category_term",
    "model_loss",
    "new_train_state",
    "readout_layers",
    "train_step",
]
