"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` wraps an ndarray and records the operation that produced it.
``backward()`` walks the tape in reverse topological order, accumulating
into ``.grad``. Broadcasting follows numpy semantics; gradients are
summed back down to each parent's shape.

Everything is float64: small models, exact-ish gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "concat",
    "softmax",
    "log_softmax",
    "gelu",
    "relu",
    "sigmoid",
    "softplus",
    "repeat_axis",
    "broadcast_to",
    "numeric_grad",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bk")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bk: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping --

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._bk is not None and node.grad is not None:
                node._bk(node.grad)

    # -- arithmetic --

    def __add__(self, other):
        return _binary(self, other, lambda a, b: a + b,
                       lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __mul__(self, other):
        return _binary(self, other, lambda a, b: a * b,
                       lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __sub__(self, other):
        return _binary(self, other, lambda a, b: a - b,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary(self, other, lambda a, b: b - a,
                       lambda g, a, b: -g, lambda g, a, b: g)

    def __truediv__(self, other):
        return _binary(self, other, lambda a, b: a / b,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _binary(self, other, lambda a, b: b / a,
                       lambda g, a, b: -g * b / (a * a), lambda g, a, b: g / a)

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda g, a, out: -g)

    def __pow__(self, exponent: float):
        p = float(exponent)
        return _unary(self, lambda a: a**p, lambda g, a, out: g * p * a ** (p - 1.0))

    def __matmul__(self, other):
        other = _as_tensor(other)
        out_data = self.data @ other.data

        def bk_a(g, a, b):
            return _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)

        def bk_b(g, a, b):
            return _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)

        return _make(out_data, (self, other), (bk_a, bk_b))

    def __getitem__(self, index):
        out_data = self.data[index]

        def bk(g, a, out):
            full = np.zeros_like(a)
            np.add.at(full, index, g)
            return full

        return _unary_data(self, out_data, bk)

    # -- shape ops --

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        return _unary_data(self, out_data, lambda g, a, out: g.reshape(a.shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)
        return _unary_data(self, out_data, lambda g, a, out: g.transpose(inv))

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    # -- reductions --

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bk(g, a, out):
            if axis is None:
                return np.broadcast_to(g, a.shape)
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(i % a.ndim for i in ax)
            gg = g
            if not keepdims:
                for i in sorted(ax):
                    gg = np.expand_dims(gg, i)
            return np.broadcast_to(gg, a.shape)

        return _unary_data(self, out_data, bk)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for i in ax:
                count *= self.data.shape[i]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- pointwise --

    def exp(self):
        return _unary(self, np.exp, lambda g, a, out: g * out)

    def log(self):
        return _unary(self, np.log, lambda g, a, out: g / a)

    def sqrt(self):
        return _unary(self, np.sqrt, lambda g, a, out: g * 0.5 / out)

    def tanh(self):
        return _unary(self, np.tanh, lambda g, a, out: g * (1.0 - out * out))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backs) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        live = tuple(p for p in parents)
        p_data = tuple(p.data for p in parents)

        def bk(g: np.ndarray) -> None:
            for parent, fn in zip(live, backs):
                if parent.requires_grad or parent._parents:
                    parent._accumulate(fn(g, *p_data))

        out._parents = live
        out._bk = bk
    return out


def _binary(a: Tensor, b, fwd, bk_a, bk_b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    data = fwd(a.data, b.data)

    def wrap_a(g, ad, bd):
        return _unbroadcast(bk_a(g, ad, bd), ad.shape)

    def wrap_b(g, ad, bd):
        return _unbroadcast(bk_b(g, ad, bd), bd.shape)

    return _make(data, (a, b), (wrap_a, wrap_b))


def _unary(a: Tensor, fwd, bk) -> Tensor:
    a = _as_tensor(a)
    data = fwd(a.data)
    return _unary_data(a, data, bk)


def _unary_data(a: Tensor, data: np.ndarray, bk) -> Tensor:
    out_holder: list[np.ndarray] = [data]

    def wrapped(g, ad):
        return bk(g, ad, out_holder[0])

    return _make(data, (a,), (wrapped,))


# --- free functions ---------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._parents = tuple(tensors)

        def bk(g: np.ndarray) -> None:
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad or t._parents:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(int(lo), int(hi))
                    t._accumulate(g[tuple(sl)])

        out._bk = bk
    return out


def broadcast_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    t = _as_tensor(t)
    data = np.broadcast_to(t.data, shape).copy()
    return _unary_data(t, data, lambda g, a, out: _unbroadcast(g, a.shape))


def repeat_axis(t: Tensor, repeats: int, axis: int) -> Tensor:
    """Nearest-neighbour style repetition of entries along one axis."""
    t = _as_tensor(t)
    axis = axis % t.data.ndim
    data = np.repeat(t.data, repeats, axis=axis)

    def bk(g, a, out):
        shape = list(a.shape)
        shape[axis:axis + 1] = [a.shape[axis], repeats]
        return g.reshape(shape).sum(axis=axis + 1)

    return _unary_data(t, data, bk)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = _as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bk(g, a, out):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _unary_data(t, y, bk)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = _as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bk(g, a, out):
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return _unary_data(t, y, bk)


def relu(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    return _unary_data(t, np.maximum(t.data, 0.0), lambda g, a, out: g * (a > 0.0))


def sigmoid(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    y = 1.0 / (1.0 + np.exp(-t.data))
    return _unary_data(t, y, lambda g, a, out: g * out * (1.0 - out))


def softplus(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    y = np.logaddexp(0.0, t.data)
    return _unary_data(t, y, lambda g, a, out: g / (1.0 + np.exp(-a)))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(t: Tensor) -> Tensor:
    """Tanh-approximation gaussian error linear unit."""
    t = _as_tensor(t)
    x = t.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def bk(g, a, out):
        inner_ = _GELU_C * (a + _GELU_A * a**3)
        th_ = np.tanh(inner_)
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * a * a)
        return g * (0.5 * (1.0 + th_) + 0.5 * a * (1.0 - th_ * th_) * d_inner)

    return _unary_data(t, y, bk)


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g
