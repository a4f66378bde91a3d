"""Dense arrays with reverse-mode differentiation.

A `Tensor` wraps an immutable numpy array. Operations are `Function`
subclasses: `apply` runs the numpy forward pass and, unless gradients are
disabled, records the parents so `backward` can walk the graph later.
Named leaves are parameters; `backward` returns gradients keyed by name.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from sketchseg.core.errors import ContractError, DimensionError, NumericError

Gradient = Dict[str, np.ndarray]

_default_dtype: contextvars.ContextVar[np.dtype] = contextvars.ContextVar("default_dtype", default=np.dtype(np.float32))
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


def default_dtype() -> np.dtype:
    return _default_dtype.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new constants (float32 or float64)."""
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported precision {dt}")
    token = _default_dtype.set(dt)
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording the graph (inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(_default_dtype.get())
    return arr


class Tensor:
    __slots__ = ("data", "name", "_ctx")

    def __init__(self, data, name: Optional[str] = None, _ctx: Optional["Function"] = None, dtype=None) -> None:
        self.data = _as_float_array(data, dtype)
        self.name = name
        self._ctx = _ctx

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # Arithmetic
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    def __radd__(self, other):
        return Add.apply(_lift(other, self), self)

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(_lift(other, self)))

    def __rsub__(self, other):
        return Add.apply(_lift(other, self), Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    def __rmul__(self, other):
        return Mul.apply(_lift(other, self), self)

    def __truediv__(self, other):
        return Mul.apply(self, Pow.apply(_lift(other, self), exponent=-1.0))

    def __rtruediv__(self, other):
        return Mul.apply(_lift(other, self), Pow.apply(self, exponent=-1.0))

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, _lift(other, self))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=tuple(axes) or None)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Function:
    """One node of the graph. Subclasses implement `forward` on arrays and `backward`."""

    parents: Tuple[Tensor, ...] = ()

    @classmethod
    def apply(cls, *args: Tensor, **kwargs) -> Tensor:
        fn = cls()
        fn.parents = tuple(as_tensor(a) for a in args)
        out = fn.forward(*[p.data for p in fn.parents], **kwargs)
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite value produced", term=cls.__name__)
        if not _grad_enabled.get():
            fn.parents = ()
            return Tensor(out)
        return Tensor(out, _ctx=fn)

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return unbroadcast(grad * self.y, self.x.shape), unbroadcast(grad * self.x, self.y.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, x, exponent: float):
        self.x, self.exponent = x, exponent
        return x ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1.0),)


class MatMul(Function):
    def forward(self, x, y):
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise DimensionError("matmul inner dimensions disagree", x.shape, y.shape)
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ self.y.T, self.x.T @ grad


class Sum(Function):
    def forward(self, x, axis=None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(np.sum(x, axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad):
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, x, index):
        self.shape, self.index = x.shape, index
        return np.asarray(x[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *xs, axis: int = 0):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Sqrt(Function):
    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Norm(Function):
    """Euclidean norm over the last axis; `eps` only guards the backward division at zero."""

    def forward(self, x, eps: float):
        self.x, self.eps = x, eps
        self.out = np.sqrt((x * x).sum(axis=-1))
        return self.out

    def backward(self, grad):
        denom = np.maximum(self.out, self.eps)[..., None]
        return (grad[..., None] * self.x / denom,)


class Sigmoid(Function):
    def forward(self, x):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, np.zeros_like(x))

    def backward(self, grad):
        return (grad * self.mask,)


class Clip(Function):
    def forward(self, x, low: float, high: float):
        self.mask = (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


class SoftmaxRows(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class MultiHeadAttention(Function):
    """softmax(Q_h K_h^T * scale) V_h for every head h, heads merged back along features.

    q is [m, d], k and v are [n, d]; head h owns feature columns h*d/H .. (h+1)*d/H.
    """

    def forward(self, q, k, v, n_heads: int, scale: float):
        m, d = q.shape
        n = k.shape[0]
        if d % n_heads or k.shape != (n, d) or v.shape != (n, d):
            raise DimensionError(f"attention over {n_heads} heads needs matching widths", q.shape, k.shape, v.shape)
        dh = d // n_heads
        self.m, self.n, self.d, self.scale = m, n, d, scale
        self.qh = q.reshape(m, n_heads, dh).transpose(1, 0, 2)
        self.kh = k.reshape(n, n_heads, dh).transpose(1, 0, 2)
        self.vh = v.reshape(n, n_heads, dh).transpose(1, 0, 2)
        logits = np.matmul(self.qh, self.kh.transpose(0, 2, 1)) * scale
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        self.weights = e / e.sum(axis=-1, keepdims=True)
        out = np.matmul(self.weights, self.vh)
        return out.transpose(1, 0, 2).reshape(m, d)

    def backward(self, grad):
        a = self.weights
        g = grad.reshape(self.m, a.shape[0], -1).transpose(1, 0, 2)
        da = np.matmul(g, self.vh.transpose(0, 2, 1))
        dv = np.matmul(a.transpose(0, 2, 1), g)
        dlogits = a * (da - (da * a).sum(axis=-1, keepdims=True)) * self.scale
        dq = np.matmul(dlogits, self.kh)
        dk = np.matmul(dlogits.transpose(0, 2, 1), self.qh)

        def merge(t, rows):
            return t.transpose(1, 0, 2).reshape(rows, self.d)

        return merge(dq, self.m), merge(dk, self.n), merge(dv, self.n)


class LayerNorm(Function):
    """Normalizes over the last axis with population variance."""

    def forward(self, x, gamma, beta, eps: float):
        n = x.shape[-1]
        if gamma.shape != (n,) or beta.shape != (n,):
            raise DimensionError("layer_norm affine parameters do not match features", x.shape, gamma.shape)
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = centered * self.inv
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad):
        n = self.xhat.shape[-1]
        flat_grad = grad.reshape(-1, n)
        flat_xhat = self.xhat.reshape(-1, n)
        dgamma = (flat_grad * flat_xhat).sum(axis=0)
        dbeta = flat_grad.sum(axis=0)
        dxhat = grad * self.gamma
        dx = (self.inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, trainable: Mapping[str, Tensor]) -> Gradient:
    """Reverse-mode gradients of a scalar `loss` for exactly the named leaves in `trainable`."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    wanted = {id(t): name for name, t in trainable.items()}
    order = _topological_order(loss)

    # Only nodes on a path to a wanted leaf need gradients.
    needs = set()
    for node in order:
        if id(node) in wanted or (
            node._ctx is not None and any(id(p) in needs for p in node._ctx.parents)
        ):
            needs.add(id(node))

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: Gradient = {}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None or id(node) not in needs:
            continue
        if id(node) in wanted:
            name = wanted[id(node)]
            result[name] = result[name] + grad if name in result else grad
        if node._ctx is None:
            continue
        for parent, pgrad in zip(node._ctx.parents, node._ctx.backward(grad)):
            if pgrad is None or id(parent) not in needs:
                continue
            pgrad = np.asarray(pgrad, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pgrad if key in grads else pgrad

    for name, t in trainable.items():
        if name not in result:
            result[name] = np.zeros_like(t.data)
    return result


__all__ = [
    "Tensor",
    "Function",
    "Gradient",
    "as_tensor",
    "backward",
    "default_dtype",
    "no_grad",
    "precision",
    "unbroadcast",
]
