from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Mapping

import numpy as np

from sketchseg.core.errors import ContractError, DimensionError
from sketchseg.core.tensor import Tensor
from sketchseg.models.schemas import EncoderConfig, FinetunePolicy


def block_prefix(layer: int) -> str:
    """Parameter prefix of the 1-based encoder layer."""
    return f"blocks.{layer - 1}"


def parameter_shapes(cfg: EncoderConfig) -> Dict[str, tuple]:
    d, p2, dj = cfg.d_model, cfg.patch_size * cfg.patch_size, cfg.d_joint
    hidden = d * cfg.mlp_ratio
    shapes: Dict[str, tuple] = {
        "patch_proj.weight": (p2, d),
        "patch_proj.bias": (d,),
        "pos_embed": (1 + cfg.n_patches, d),
        "vst": (d,),
    }
    for i in range(cfg.n_prompts):
        shapes[f"prompt.{i}"] = (d,)
    for layer in range(1, cfg.n_layers + 1):
        b = block_prefix(layer)
        shapes.update({
            f"{b}.ln1.gamma": (d,), f"{b}.ln1.beta": (d,),
            f"{b}.attn.q.weight": (d, d), f"{b}.attn.q.bias": (d,),
            f"{b}.attn.k.weight": (d, d), f"{b}.attn.k.bias": (d,),
            f"{b}.attn.v.weight": (d, d), f"{b}.attn.v.bias": (d,),
            f"{b}.attn.out.weight": (d, d), f"{b}.attn.out.bias": (d,),
            f"{b}.ln2.gamma": (d,), f"{b}.ln2.beta": (d,),
            f"{b}.mlp.fc1.weight": (d, hidden), f"{b}.mlp.fc1.bias": (hidden,),
            f"{b}.mlp.fc2.weight": (hidden, d), f"{b}.mlp.fc2.bias": (d,),
            f"{b}.vv_ln.gamma": (d,), f"{b}.vv_ln.beta": (d,),
        })
        if layer in cfg.cross_attn_layers:
            shapes[f"{b}.cross_q.weight"] = (dj, d)
            shapes[f"{b}.cross_q.bias"] = (d,)
    shapes["proj"] = (d, dj)
    return shapes


def is_layer_norm(name: str) -> bool:
    return name.endswith((".gamma", ".beta")) and any(tag in name for tag in (".ln1.", ".ln2.", ".vv_ln."))


def is_prompt(name: str) -> bool:
    return name.startswith("prompt.")


def is_cross_query(name: str) -> bool:
    return ".cross_q." in name


def trainable_names(cfg: EncoderConfig, finetune: FinetunePolicy = "ln+vp") -> FrozenSet[str]:
    """Names the optimizer may update. Cross-attention queries train under every policy."""
    names = set()
    for name in parameter_shapes(cfg):
        if is_cross_query(name) or finetune == "full":
            names.add(name)
        elif is_layer_norm(name) and finetune in ("ln+vp", "ln"):
            names.add(name)
        elif is_prompt(name) and finetune in ("ln+vp", "vp"):
            names.add(name)
    return frozenset(names)


@dataclass(frozen=True)
class EncoderParams:
    """Named parameter arrays of the dual-path encoder, each flagged trainable or frozen."""

    arrays: Mapping[str, np.ndarray]
    trainable: FrozenSet[str]

    def __post_init__(self) -> None:
        missing = self.trainable - set(self.arrays)
        if missing:
            raise ContractError(f"trainable names without arrays: {sorted(missing)}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> List[str]:
        return sorted(self.arrays)

    def frozen_names(self) -> List[str]:
        return sorted(set(self.arrays) - self.trainable)

    def n_trainable_scalars(self) -> int:
        return int(sum(self.arrays[n].size for n in self.trainable))

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams({k: v.astype(dtype) for k, v in self.arrays.items()}, self.trainable)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "EncoderParams":
        for name, arr in updates.items():
            if name not in self.arrays:
                raise ContractError(f"unknown parameter {name!r}")
            if arr.shape != self.arrays[name].shape:
                raise DimensionError(f"update for {name}", arr.shape, self.arrays[name].shape)
        return EncoderParams({**self.arrays, **updates}, self.trainable)

    def leaves(self) -> Dict[str, Tensor]:
        return {name: Tensor(arr, name=name) for name, arr in self.arrays.items()}

    def check(self, cfg: EncoderConfig) -> None:
        expected = parameter_shapes(cfg)
        if set(expected) != set(self.arrays):
            diff = sorted(set(expected) ^ set(self.arrays))
            raise ContractError(f"parameters do not match the encoder config: {diff[:5]}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise DimensionError(f"parameter {name}", self.arrays[name].shape, shape)


def init_params(cfg: EncoderConfig, finetune: FinetunePolicy = "ln+vp", seed: int | None = None) -> EncoderParams:
    """Seeded random backbone; LN at identity, cross-attention query bias at zero."""
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith((".beta", ".bias")):
            arr = np.zeros(shape)
        elif name == "pos_embed":
            arr = 0.02 * rng.standard_normal(shape)
        elif name == "vst" or is_prompt(name):
            arr = rng.standard_normal(shape) / np.sqrt(cfg.d_model)
        else:
            arr = rng.standard_normal(shape) / np.sqrt(shape[0])
        arrays[name] = arr.astype(np.float32)
    return EncoderParams(arrays, trainable_names(cfg, finetune))


def enumerate_trainable(names: Iterable[str]) -> Dict[str, int]:
    """Count trainable names per group: ln, prompt, cross_q, other."""
    counts = {"ln": 0, "prompt": 0, "cross_q": 0, "other": 0}
    for name in names:
        if is_layer_norm(name):
            counts["ln"] += 1
        elif is_prompt(name):
            counts["prompt"] += 1
        elif is_cross_query(name):
            counts["cross_q"] += 1
        else:
            counts["other"] += 1
    return counts
