"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation the model needs is implemented here as a differentiable
primitive over numpy arrays. Ops record their inputs and a backward closure
on the output tensor as they execute (a dynamic tape); ``backward`` walks the
resulting graph once in reverse topological order. Graphs are built per
forward pass and share no global state, so independent passes may run on
separate threads.

All data is float64. Every op output is checked for NaN/Inf and a
``NumericalError`` is raised on violation.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

from .errors import NumericalError, ShapeError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

LAYERNORM_EPS = 1e-5


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """A float64 array plus optional gradient and tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(data)
        # fast finiteness screen: a non-finite element forces a non-finite sum;
        # the exact check runs only when the sum itself is suspect
        with np.errstate(over="ignore", invalid="ignore"):
            total = self.data.sum()
        if not np.isfinite(total) and not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in tensor {name or ''!r}")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g) -> None:
        g = np.asarray(g, dtype=np.float64)
        if self.grad is None:
            # views are copied; owned arrays are adopted (never mutated later,
            # accumulation always rebinds via addition)
            self.grad = g if g.base is None else g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(-g, b.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting any stacked dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _make(a.data.T.copy(), (a,), backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Repeat each row k times: (n, d) -> (n*k, d)."""
    n, d = a.shape
    data = np.repeat(a.data, k, axis=0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(n, k, d).sum(axis=1))

    return _make(data, (a,), backward)


def tile_rows(a: Tensor, k: int) -> Tensor:
    """Stack k copies of the whole matrix: (n, d) -> (k*n, d)."""
    n, d = a.shape
    data = np.tile(a.data, (k, 1))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(k, n, d).sum(axis=0))

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data.copy(), (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / data)

    return _make(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    phi = 0.5 * (1.0 + _erf(x / _SQRT2))
    data = x * phi

    def backward(g):
        if a.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            a._accumulate(g * (phi + x * pdf))

    return _make(data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed overflow-free."""
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / (1.0 + np.exp(-x)))

    return _make(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - dot))

    return _make(data, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"logsumexp axis {axis} invalid for shape {a.shape}")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = m + np.log(s)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def backward(g):
        if a.requires_grad:
            gk = g if keepdims else np.expand_dims(g, axis=axis)
            a._accumulate(gk * (e / s))

    return _make(data, (a,), backward)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            gk = g if keepdims else np.expand_dims(g, axis=axis)
            a._accumulate(np.broadcast_to(gk, a.shape).copy())

    return _make(np.asarray(data), (a,), backward)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g / n, a.shape).copy())
        else:
            gk = g if keepdims else np.expand_dims(g, axis=axis)
            a._accumulate(np.broadcast_to(gk / n, a.shape).copy())

    return _make(np.asarray(data), (a,), backward)


def concat(tensors: list[Tensor] | tuple[Tensor, ...], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tensors, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    dim = a.shape[axis]
    if not (0 <= start <= stop <= dim):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros(a.shape)
            full[idx] = g
            a._accumulate(full)

    return _make(data, (a,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis to mean 0 / variance 1, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_sum_to(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_sum_to(g, bias.shape))
        if x.requires_grad:
            u = g * gain.data
            m1 = u.mean(axis=-1, keepdims=True)
            m2 = (u * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((u - m1 - xhat * m2) * inv)

    return _make(data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar. If nothing in the graph requires a gradient
    this is a no-op: no gradient arrays are allocated.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
