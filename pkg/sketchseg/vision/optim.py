from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from sketchseg.core.errors import ContractError, DimensionError


@dataclass
class AdamW:
    """Adam with decoupled weight decay over a fixed set of named arrays.

    p <- p - lr * (wd * p + m_hat / (sqrt(v_hat) + eps)); with lr = 0 nothing moves.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr < 0 or not np.isfinite(self.lr):
            raise ContractError(f"learning rate must be finite and non-negative, got {self.lr}")

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """New arrays for every name in `grads`; `params` is not modified."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        updated: Dict[str, np.ndarray] = {}
        for name in sorted(grads):
            p, g = params[name], grads[name]
            if g.shape != p.shape:
                raise DimensionError(f"gradient for {name}", g.shape, p.shape)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            self.m[name] = m.astype(p.dtype)
            self.v[name] = v.astype(p.dtype)
            if self.lr == 0.0:
                updated[name] = p
                continue
            direction = (m / c1) / (np.sqrt(v / c2) + self.eps)
            updated[name] = (p - self.lr * (self.weight_decay * p + direction)).astype(p.dtype)
        return updated

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"adam_m/{k}": v for k, v in self.m.items()}
        arrays.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return arrays

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        self.m = {k[len("adam_m/"):]: np.array(v) for k, v in arrays.items() if k.startswith("adam_m/")}
        self.v = {k[len("adam_v/"):]: np.array(v) for k, v in arrays.items() if k.startswith("adam_v/")}


__all__ = ["AdamW"]
