from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from sketchseg import config
from sketchseg.core.errors import ContractError
from sketchseg.core.tensor import no_grad
from sketchseg.models.domain import SketchBitmap
from sketchseg.models.schemas import EncoderConfig, TrainingConfig
from sketchseg.services.text_embedding import TextEncoder
from sketchseg.vision.encoder import DualPathOutput, encode_sketch
from sketchseg.vision.params import init_params
from sketchseg.vision.training import TrainState, new_train_state

logger = logging.getLogger("sketchseg.model")


def build_text_encoder(encoder: EncoderConfig, embeddings_path: Optional[str] = None) -> TextEncoder:
    path = embeddings_path if embeddings_path is not None else config.TEXT_EMBEDDINGS_PATH
    if path:
        return TextEncoder.from_file(path, encoder.d_joint, seed=encoder.text_seed)
    return TextEncoder(encoder.d_joint, seed=encoder.text_seed)


@dataclass
class SketchSegmenter:
    """Encoder config, training config, weights, threshold and text tower in one bundle."""

    encoder: EncoderConfig
    training: TrainingConfig
    state: TrainState
    text: TextEncoder
    seed: int = 0
    vocabulary: Tuple[str, ...] = ()

    @classmethod
    def initialize(
        cls,
        encoder: EncoderConfig,
        training: TrainingConfig,
        text: Optional[TextEncoder] = None,
        vocabulary: Sequence[str] = (),
    ) -> "SketchSegmenter":
        params = init_params(encoder, training.finetune, seed=encoder.init_seed)
        state = new_train_state(params, training)
        logger.info(
            "Model initialized",
            extra={"event": "model_initialized", "trainable_scalars": params.n_trainable_scalars() + 1},
        )
        return cls(
            encoder=encoder,
            training=training,
            state=state,
            text=text or build_text_encoder(encoder),
            seed=training.seed,
            vocabulary=tuple(vocabulary),
        )

    @property
    def params(self):
        return self.state.params

    @property
    def tau(self) -> float:
        return self.state.tau

    @property
    def step(self) -> int:
        return self.state.step

    def encode(self, bitmap: SketchBitmap) -> DualPathOutput:
        """Inference pass; no graph is recorded."""
        if bitmap.intensity.shape != (self.encoder.image_size, self.encoder.image_size):
            raise ContractError(
                f"sketch is {bitmap.intensity.shape}, model expects {self.encoder.image_size}px squares"
            )
        with no_grad():
            return encode_sketch(bitmap, self.params.leaves(), self.encoder)

    def category_vectors(self, categories: Sequence[str]) -> np.ndarray:
        if not categories:
            raise ContractError("at least one category is required")
        return np.stack([t.vector for t in self.text.category_tokens(categories)])


__all__ = ["SketchSegmenter", "build_text_encoder"]
