"""Central finite differences against `backward`.

Run in float64 (`precision(np.float64)` plus float64 parameter arrays); the
float32 default is too coarse for a 1e-4 relative tolerance.
"""
from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional

import numpy as np

from sketchseg.core.errors import ContractError
from sketchseg.core.tensor import Gradient, Tensor, backward, no_grad

LossFn = Callable[[Mapping[str, Tensor]], Tensor]

# Gradients smaller than this are compared in absolute terms.
RELATIVE_FLOOR = 1e-6


def _leaves(params: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    return {name: Tensor(arr, name=name) for name, arr in params.items()}


def _scalar(fn: LossFn, params: Mapping[str, np.ndarray]) -> float:
    # perturbed evaluations never need a graph
    with no_grad():
        out = fn(_leaves(params))
    if out.data.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def analytic_gradient(fn: LossFn, params: Mapping[str, np.ndarray]) -> Gradient:
    leaves = _leaves(params)
    return backward(fn(leaves), leaves)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), RELATIVE_FLOOR)
    return np.abs(analytic - numeric) / scale


def finite_diff_check(
    fn: LossFn,
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    *,
    analytic: Optional[Gradient] = None,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """Max relative error per parameter between `backward` and (f(p+h) - f(p-h)) / 2h.

    `max_entries` limits the check to a seeded sample of entries per parameter.
    """
    if step <= 0:
        raise ContractError("finite difference step must be positive")
    params = {name: np.array(arr, copy=True) for name, arr in params.items()}
    if analytic is None:
        analytic = analytic_gradient(fn, params)
    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    for name in sorted(params):
        base = params[name]
        flat_indices = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_indices = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        worst = 0.0
        for flat in flat_indices:
            idx = np.unravel_index(int(flat), base.shape)
            original = base[idx]
            base[idx] = original + step
            f_plus = _scalar(fn, params)
            base[idx] = original - step
            f_minus = _scalar(fn, params)
            base[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = float(relative_error(np.asarray(analytic[name][idx]), np.asarray(numeric)))
            worst = max(worst, err)
        report[name] = worst
    return report


__all__ = ["LossFn", "RELATIVE_FLOOR", "analytic_gradient", "finite_diff_check", "relative_error"]
