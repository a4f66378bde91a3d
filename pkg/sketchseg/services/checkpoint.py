"""Binary checkpoint.

Layout (all integers little-endian):
    8 bytes   magic b"SKSEGCK\\0"
    u32       format version
    u32       header length, then UTF-8 JSON header
              {encoder, training, tau, step, seed, vocabulary, adam_t, trainable}
    u32       array count, then per array:
              u16 name length, name, u8 ndim, u32 x ndim shape,
              u64 payload length, float32 LE payload
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from sketchseg.core.errors import CheckpointError, ContractError, DimensionError
from sketchseg.models.schemas import EncoderConfig, TrainingConfig
from sketchseg.services.text_embedding import TextEncoder
from sketchseg.vision.model import SketchSegmenter, build_text_encoder
from sketchseg.vision.optim import AdamW
from sketchseg.vision.params import EncoderParams, trainable_names
from sketchseg.vision.training import TrainState

logger = logging.getLogger("sketchseg.checkpoint")

MAGIC = b"SKSEGCK\x00"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    encoder: EncoderConfig
    training: TrainingConfig
    arrays: Dict[str, np.ndarray]
    tau: float
    step: int = 0
    seed: int = 0
    vocabulary: Tuple[str, ...] = ()
    adam_t: int = 0
    trainable: Tuple[str, ...] = ()
    optimizer_arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SketchSegmenter) -> "Checkpoint":
        state = model.state
        return cls(
            encoder=model.encoder,
            training=model.training,
            arrays=dict(state.params.arrays),
            tau=float(state.tau),
            step=state.step,
            seed=model.seed,
            vocabulary=tuple(model.vocabulary),
            adam_t=state.optimizer.t,
            trainable=tuple(sorted(state.params.trainable)),
            optimizer_arrays=state.optimizer.state_arrays(),
        )

    def to_model(self, text: Optional[TextEncoder] = None) -> SketchSegmenter:
        trainable = frozenset(self.trainable) or trainable_names(self.encoder, self.training.finetune)
        try:
            params = EncoderParams({k: np.array(v, dtype=np.float32) for k, v in self.arrays.items()}, trainable)
            params.check(self.encoder)
        except (ContractError, DimensionError) as e:
            raise CheckpointError(f"checkpoint does not match its encoder config: {e}") from e
        optimizer = AdamW(
            lr=self.training.learning_rate,
            beta1=self.training.beta1,
            beta2=self.training.beta2,
            eps=self.training.adam_eps,
            weight_decay=self.training.weight_decay,
        )
        optimizer.load_state_arrays(self.optimizer_arrays, self.adam_t)
        state = TrainState(params=params, tau=self.tau, optimizer=optimizer, step=self.step)
        return SketchSegmenter(
            encoder=self.encoder,
            training=self.training,
            state=state,
            text=text or build_text_encoder(self.encoder),
            seed=self.seed,
            vocabulary=self.vocabulary,
        )


def _header(ckpt: Checkpoint) -> bytes:
    doc = {
        "encoder": ckpt.encoder.model_dump(mode="json"),
        "training": ckpt.training.model_dump(mode="json"),
        "tau": ckpt.tau,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "vocabulary": list(ckpt.vocabulary),
        "adam_t": ckpt.adam_t,
        "trainable": list(ckpt.trainable),
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint | SketchSegmenter, path: str | Path) -> Path:
    if isinstance(ckpt, SketchSegmenter):
        ckpt = Checkpoint.from_model(ckpt)
    path = Path(path)
    header = _header(ckpt)
    tables = {**ckpt.arrays, **ckpt.optimizer_arrays}
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header, struct.pack("<I", len(tables))]
    for name in sorted(tables):
        # scalars such as the optimizer moments of tau keep ndim 0
        arr = np.asarray(tables[name], dtype=_LE_F32)
        raw_name = name.encode("utf-8")
        payload = arr.tobytes()
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<Q", len(payload)) + payload)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    logger.info("Checkpoint saved", extra={"event": "checkpoint_saved", "path": str(path), "step": ckpt.step})
    return path


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str, parameter: Optional[str] = None) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}", parameter=parameter)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str, parameter: Optional[str] = None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, parameter))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    reader = _Reader(data)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path} is not a sketchseg checkpoint")
    version, header_len = reader.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        doc = json.loads(reader.take(header_len, "header").decode("utf-8"))
        encoder = EncoderConfig(**doc["encoder"])
        training = TrainingConfig(**doc["training"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValidationError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e

    (count,) = reader.unpack("<I", "array count")
    arrays: Dict[str, np.ndarray] = {}
    optimizer_arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "array name")
        try:
            name = reader.take(name_len, "array name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("corrupt array name") from e
        (ndim,) = reader.unpack("<B", "array rank", name)
        shape = reader.unpack(f"<{ndim}I", "array shape", name)
        (nbytes,) = reader.unpack("<Q", "payload length", name)
        expected = int(np.prod(shape, dtype=np.int64)) * _LE_F32.itemsize
        if nbytes != expected:
            raise CheckpointError(f"payload is {nbytes} bytes, shape {shape} needs {expected}", parameter=name)
        arr = np.frombuffer(reader.take(nbytes, "payload", name), dtype=_LE_F32).reshape(shape).astype(np.float32)
        (optimizer_arrays if name.startswith(("adam_m/", "adam_v/")) else arrays)[name] = arr
    if reader.pos != len(data):
        raise CheckpointError(f"{len(data) - reader.pos} trailing bytes after the last array")

    return Checkpoint(
        encoder=encoder,
        training=training,
        arrays=arrays,
        tau=float(doc.get("tau", training.threshold_init)),
        step=int(doc.get("step", 0)),
        seed=int(doc.get("seed", 0)),
        vocabulary=tuple(doc.get("vocabulary", ())),
        adam_t=int(doc.get("adam_t", 0)),
        trainable=tuple(doc.get("trainable", ())),
        optimizer_arrays=optimizer_arrays,
    )


def load_model(path: str | Path, text: Optional[TextEncoder] = None) -> SketchSegmenter:
    return load_checkpoint(path).to_model(text)


__all__ = ["Checkpoint", "FORMAT_VERSION", "MAGIC", "load_checkpoint", "load_model", "save_checkpoint"]
