"""Reverse-mode automatic differentiation over dense numpy tensors.

Values are stored as 32-bit floats by default (64-bit arrays are accepted
and propagated, which the test suite uses for tight finite-difference
checks). Reductions, matrix products, and optimizer moments accumulate in
64 bits regardless of the storage dtype.

A Tape records executed ops eagerly; ``backward`` replays it once in
reverse and accumulates gradients into leaf tensors. One tape per training
step, single-threaded; tensors that are not being recorded are immutable
from the engine's point of view and safe to share across workers.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class NonFiniteError(ValueError):
    """A forward op produced NaN or Inf (never silently propagated)."""


class Tensor:
    """Dense n-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "_g")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self._g: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t.is_leaf = True
        t._g = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"

    # Arithmetic sugar; each delegates to a recorded op below.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, kind: str) -> None:
    # A 64-bit sum cannot overflow at our scales, so a non-finite sum is an
    # exact witness that some element is NaN/Inf (single cheap pass).
    if np.isfinite(np.sum(arr, dtype=np.float64)):
        return
    bad = int(np.flatnonzero(~np.isfinite(arr))[0])
    raise NonFiniteError(f"non-finite value from op '{kind}' at flat index {bad}")


class _Node:
    __slots__ = ("kind", "inputs", "out", "vjp")

    def __init__(self, kind, inputs, out, vjp):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tape:
    """Ordered record of ops; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[_Node] = []


_ACTIVE: list[Tape] = []


@contextmanager
def tape():
    """Activate a fresh tape for the duration of the block."""
    t = Tape()
    _ACTIVE.append(t)
    try:
        yield t
    finally:
        _ACTIVE.pop()


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


# Registry of op kinds, used by the finite-difference battery to insist on
# full coverage: every kind recorded here must have a gradient check.
OP_KINDS: set[str] = set()


def record_op(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Create the output tensor for an op and record it on the active tape.

    ``vjp`` maps the output cotangent to one cotangent per input (None for
    inputs that do not receive gradient). Extension point for fused ops in
    other modules (splatting, spectral solves, interpolation).
    """
    _check_finite(out_data, kind)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._g = None
    t = active_tape()
    track = t is not None and any(i.requires_grad for i in inputs)
    out.requires_grad = track
    out.is_leaf = not track
    if track:
        t.nodes.append(_Node(kind, tuple(inputs), out, vjp))
    return out


def _op(kind: str):
    OP_KINDS.add(kind)

    def deco(fn):
        return fn

    return deco


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy trailing-dim broadcast)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad


def _like(g: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return np.asarray(g, dtype=ref.dtype)


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy trailing-dimension broadcasting)

@_op("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return record_op("add", (a, b), out, lambda g: (
        _like(_unbroadcast(g, a.shape), a.data),
        _like(_unbroadcast(g, b.shape), b.data)))


@_op("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return record_op("sub", (a, b), out, lambda g: (
        _like(_unbroadcast(g, a.shape), a.data),
        _like(_unbroadcast(-g, b.shape), b.data)))


@_op("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return record_op("mul", (a, b), out, lambda g: (
        _like(_unbroadcast(g * b.data, a.shape), a.data),
        _like(_unbroadcast(g * a.data, b.shape), b.data)))


@_op("div")
def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return record_op("div", (a, b), out, lambda g: (
        _like(_unbroadcast(g / b.data, a.shape), a.data),
        _like(_unbroadcast(-g * a.data / (b.data * b.data), b.shape), b.data)))


@_op("neg")
def neg(a: Tensor) -> Tensor:
    return record_op("neg", (a,), -a.data, lambda g: (-g,))


@_op("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    dt = np.result_type(a.data, b.data)
    # 64-bit products are kept alive for the backward pass: one upcast each.
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    out = (a64 @ b64).astype(dt, copy=False)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        ga = (g64 @ b64.T).astype(a.data.dtype, copy=False)
        gb = (a64.T @ g64).astype(b.data.dtype, copy=False)
        return ga, gb

    return record_op("matmul", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# elementwise unary ops

@_op("exp")
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op("exp", (a,), out, lambda g: (g * out,))


@_op("log")
def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return record_op("log", (a,), out, lambda g: (g / a.data,))


@_op("sqrt")
def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record_op("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


@_op("power")
def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return record_op("power", (a,), out,
                     lambda g: (_like(g * p * a.data ** (p - 1.0), a.data),))


@_op("abs")
def abs_(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    return record_op("abs", (a,), out, lambda g: (g * np.sign(a.data),))


@_op("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data).astype(a.data.dtype)
    return record_op("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


@_op("tanh")
def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record_op("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


@_op("relu")
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0)
    return record_op("relu", (a,), out, lambda g: (np.where(mask, g, 0),))


@_op("leaky_relu")
def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    # One cached scale array serves both passes.
    scale = np.where(a.data > 0, a.data.dtype.type(1.0), a.data.dtype.type(slope))
    out = a.data * scale
    return record_op("leaky_relu", (a,), out, lambda g: (g * scale,))


@_op("softplus")
def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data).astype(a.data.dtype)
    return record_op("softplus", (a,), out,
                     lambda g: (g * expit(a.data).astype(a.data.dtype),))


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation)

def _restore_axes(g: np.ndarray, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(a % len(shape) for a in ax)
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


@_op("sum")
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    return record_op("sum", (a,), out,
                     lambda g: (_restore_axes(g, a.shape, axis, keepdims).astype(a.data.dtype),))


@_op("mean")
def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    denom = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        return (_restore_axes(g, a.shape, axis, keepdims).astype(a.data.dtype) / denom,)

    return record_op("mean", (a,), out, vjp)


@_op("max")
def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    # Ties send the whole cotangent to the first maximizer.
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    picked = np.take_along_axis(a.data, idx, axis)
    out = picked if keepdims else np.squeeze(picked, axis=axis)

    def vjp(g):
        g2 = g if keepdims else np.expand_dims(g, axis)
        gz = np.zeros_like(a.data)
        np.put_along_axis(gz, idx, g2, axis)
        return (gz,)

    return record_op("max", (a,), out, vjp)


@_op("norm")
def norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along an axis; gradient at the zero vector is zero."""
    sq = np.sum(a.data.astype(np.float64) ** 2, axis=axis, keepdims=True)
    n = np.sqrt(sq)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return ((g * a.data / safe * (n > 0)).astype(a.data.dtype),)

    out = (n if keepdims else np.squeeze(n, axis)).astype(a.data.dtype)
    return record_op("norm", (a,), out, vjp)


# ---------------------------------------------------------------------------
# shape and indexing ops

@_op("broadcast")
def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    return record_op("broadcast", (a,), out,
                     lambda g: (_like(_unbroadcast(g, a.shape), a.data),))


@_op("reshape")
def reshape(a: Tensor, shape) -> Tensor:
    return record_op("reshape", (a,), a.data.reshape(shape),
                     lambda g: (g.reshape(a.shape),))


@_op("transpose")
def transpose(a: Tensor, axes=None) -> Tensor:
    ax = tuple(range(a.data.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(ax)
    return record_op("transpose", (a,), np.transpose(a.data, ax),
                     lambda g: (np.transpose(g, inv),))


@_op("concat")
def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return record_op("concat", tuple(parts), out, vjp)


@_op("slice")
def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out)

    def vjp(g):
        gz = np.zeros_like(a.data)
        gz[key] = g
        return (gz,)

    return record_op("slice", (a,), np.ascontiguousarray(out), vjp)


def scatter_rows_sum(num: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values`` rows into ``num`` buckets (sort + reduceat; much
    faster than np.add.at for wide rows)."""
    if values.shape[0] == 0:
        return np.zeros((num,) + values.shape[1:], dtype=values.dtype)
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    svals = values[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sidx)) + 1])
    sums = np.add.reduceat(svals, starts, axis=0)
    out = np.zeros((num,) + values.shape[1:], dtype=values.dtype)
    out[sidx[starts]] = sums
    return out


@_op("gather")
def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Index the leading axis with an integer array (repeats allowed)."""
    idx = np.asarray(idx)
    out = a.data[idx]

    def vjp(g):
        return (scatter_rows_sum(a.shape[0], idx.reshape(-1),
                                 g.reshape((-1,) + a.shape[1:])),)

    return record_op("gather", (a,), np.ascontiguousarray(out), vjp)


@_op("segment_sum")
def segment_sum(a: Tensor, seg: np.ndarray, num: int) -> Tensor:
    """Sum rows of ``a`` into ``num`` buckets by segment id."""
    seg = np.asarray(seg)
    out = scatter_rows_sum(num, seg, a.data.astype(np.float64)).astype(a.data.dtype)
    return record_op("segment_sum", (a,), out,
                     lambda g: (np.ascontiguousarray(g[seg]),))


# ---------------------------------------------------------------------------
# backward pass and optimizers

def backward(loss: Tensor, t: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires-grad leaf."""
    t = t or active_tape()
    if t is None or not t.nodes:
        raise ValueError("backward: no recorded operations on the tape")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    touched: list[Tensor] = [loss]
    loss._g = np.ones_like(loss.data)
    for node in reversed(t.nodes):
        g = node.out._g
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._g is None:
                inp._g = np.asarray(gi, dtype=inp.data.dtype)
                touched.append(inp)
            else:
                inp._g = (inp._g + gi).astype(inp.data.dtype, copy=False)
    for x in touched:
        if x.is_leaf and x.requires_grad:
            x.grad = x._g if x.grad is None else x.grad + x._g
        x._g = None


class Sgd:
    """Plain gradient descent."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise RuntimeError("Sgd.step: parameter has no gradient")
            p.data = p.data - (self.lr * p.grad).astype(p.data.dtype)
        self.zero_grad()


class Adam:
    """Adaptive-moment optimizer; moments accumulate in 64-bit."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise RuntimeError("Adam.step: parameter has no gradient")
            g = p.grad.astype(np.float64)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mh = m / (1 - b1 ** self.t)
            vh = v / (1 - b2 ** self.t)
            p.data = (p.data - self.lr * mh / (np.sqrt(vh) + self.eps)).astype(p.data.dtype)
        self.zero_grad()
