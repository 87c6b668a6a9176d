"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

Conventions, fixed once for the whole package:

- Tensors are dense, row-major, float32 by default; float64 is used for
  gradient checks.
- Graphs are built eagerly. Creation order is a valid topological order, and
  backward() walks it in exact reverse, so gradient accumulation order is
  fixed and results are bit-deterministic per input.
- Elementwise binary ops accept equal shapes, or a right operand whose shape
  equals the left's with the first (batch) extent removed; its gradient is
  sum-reduced over that batch axis.
- concat joins along the last axis.
- relu's subgradient at exactly 0 is 0.

Tensors are immutable after creation except for gradient accumulation;
trainable parameter data is only rewritten by the optimizer between graphs.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "tensor",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "activation",
    "tanh",
    "relu",
    "sigmoid",
    "reduce",
    "sum_all",
    "mean_all",
    "mse",
    "concat",
    "slice_last",
    "gather_rows",
    "stop_gradient",
    "straight_through",
    "backward",
    "finite_diff_check",
    "freeze_nondiff",
    "frozen_value",
]

_seq_counter = itertools.count()


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Backward called on a stale graph or a non-scalar loss."""


class Tensor:
    """Dense real array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps", "_seq", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
        self._seq = next(_seq_counter)
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return elementwise("sub", self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise("mul", self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjps: tuple) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjps = vjps
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes {sorted(d.name for d in dtypes)}; cast explicitly")


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """add/sub/mul with equal shapes, or b batched against a's leading axis."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("elementwise expects Tensor operands")
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        reduce_b = False
    elif a.ndim >= 1 and b.shape == a.shape[1:]:
        reduce_b = True
    else:
        raise ShapeError(f"elementwise {kind}: shapes {a.shape} and {b.shape} not compatible")

    if kind == "add":
        data = a.data + b.data
        va = lambda g: g
        vb_full = lambda g: g
    elif kind == "sub":
        data = a.data - b.data
        va = lambda g: g
        vb_full = lambda g: -g
    elif kind == "mul":
        data = a.data * b.data
        va = lambda g: g * b.data
        vb_full = lambda g: g * a.data
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")

    if reduce_b:
        vb = lambda g: vb_full(g).sum(axis=0)
    else:
        vb = vb_full
    return _result(data, (a, b), (va, vb))


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def scale(x: Tensor, alpha: float) -> Tensor:
    """Multiply by a python scalar without changing dtype."""
    c = x.dtype.type(alpha)
    data = x.data * c
    return _result(data, (x,), (lambda g: g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product; batched calls loop at the caller."""
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    va = lambda g: g @ b.data.T
    vb = lambda g: a.data.T @ g
    return _result(data, (a, b), (va, vb))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "tanh":
        out = np.tanh(x.data)
        vjp = lambda g: g * (1.0 - out * out)
    elif kind == "relu":
        out = np.maximum(x.data, 0)
        mask = (x.data > 0).astype(x.dtype)
        vjp = lambda g: g * mask
    elif kind == "sigmoid":
        out = _sigmoid_stable(x.data)
        vjp = lambda g: g * (out * (1.0 - out))
    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return _result(out, (x,), (vjp,))


def tanh(x: Tensor) -> Tensor:
    return activation("tanh", x)


def relu(x: Tensor) -> Tensor:
    return activation("relu", x)


def sigmoid(x: Tensor) -> Tensor:
    return activation("sigmoid", x)


def reduce(kind: str, x: Tensor) -> Tensor:
    """sum or mean over all elements, producing a scalar (shape ())."""
    if x.data.size == 0:
        raise ShapeError("reduce of an empty tensor")
    if kind == "sum":
        data = np.asarray(x.data.sum(), dtype=x.dtype)
        vjp = lambda g: np.broadcast_to(g, x.shape).astype(x.dtype, copy=True)
    elif kind == "mean":
        n = x.data.size
        data = np.asarray(x.data.sum() / x.dtype.type(n), dtype=x.dtype)
        inv = x.dtype.type(1.0 / n)
        vjp = lambda g: np.broadcast_to(g * inv, x.shape).astype(x.dtype, copy=True)
    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return _result(data, (x,), (vjp,))


def sum_all(x: Tensor) -> Tensor:
    return reduce("sum", x)


def mean_all(x: Tensor) -> Tensor:
    return reduce("mean", x)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    if a.data.size == 0:
        raise ShapeError("mse of empty tensors")
    diff = a.data - b.data
    n = a.data.size
    data = np.asarray((diff * diff).sum() / a.dtype.type(n), dtype=a.dtype)
    coef = a.dtype.type(2.0 / n)
    va = lambda g: g * coef * diff
    vb = lambda g: -(g * coef * diff)
    return _result(data, (a, b), (va, vb))


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis; backward splits by original extents."""
    if len(parts) == 0:
        raise ShapeError("concat of zero parts")
    _check_same_dtype(*parts)
    nd = parts[0].ndim
    if nd == 0:
        raise ShapeError("concat requires at least 1-D parts")
    for p in parts[1:]:
        if p.ndim != nd or p.shape[:-1] != parts[0].shape[:-1]:
            raise ShapeError(f"concat parts disagree: {[q.shape for q in parts]}")
    data = np.concatenate([p.data for p in parts], axis=-1)
    vjps = []
    off = 0
    for p in parts:
        w = p.shape[-1]
        start = off

        def vjp(g, s=start, e=off + w):
            return np.ascontiguousarray(g[..., s:e])

        vjps.append(vjp)
        off += w
    return _result(data, tuple(parts), tuple(vjps))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Narrow along the last axis; backward scatters into a zero buffer."""
    if x.ndim == 0:
        raise ShapeError("slice_last requires at least 1-D input")
    if not (0 <= start < stop <= x.shape[-1]):
        raise ShapeError(f"slice [{start}:{stop}] out of bounds for {x.shape}")
    data = np.ascontiguousarray(x.data[..., start:stop])

    def vjp(g):
        buf = np.zeros_like(x.data)
        buf[..., start:stop] = g
        return buf

    return _result(data, (x,), (vjp,))


def gather_rows(mat: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; backward accumulates into selected rows only."""
    if mat.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= mat.shape[0]):
        raise ShapeError("gather_rows index out of range")
    data = mat.data[idx].copy()

    def vjp(g):
        buf = np.zeros_like(mat.data)
        np.add.at(buf, idx, g)
        return buf

    return _result(data, (mat,), (vjp,))


# ---------------------------------------------------------------------------
# stop-gradient, with optional record/replay freezing for gradient checks


class NondiffCache:
    """Records values of non-differentiable choices on a first pass and
    replays them on later passes.

    The analytic gradient of a graph treats stop-gradient outputs (and other
    frozen values, e.g. nearest-code indices) as constants. Freezing them
    makes finite differencing see the same locally-smooth function the
    backward pass differentiates.
    """

    def __init__(self):
        self.values: list = []
        self.cursor = 0
        self.recording = True

    def take(self, compute):
        if self.recording:
            v = compute()
            self.values.append(v)
            return v
        if self.cursor >= len(self.values):
            raise GraphError("nondiff replay ran past the recorded values")
        v = self.values[self.cursor]
        self.cursor += 1
        return v


_freeze_stack: list[NondiffCache] = []


@contextmanager
def _frozen(cache: NondiffCache):
    cache.cursor = 0
    _freeze_stack.append(cache)
    try:
        yield cache
    finally:
        _freeze_stack.pop()
        cache.recording = False


def frozen_value(compute):
    """Route a non-differentiable computation through the active freeze cache."""
    if _freeze_stack:
        return _freeze_stack[-1].take(compute)
    return compute()


def freeze_nondiff(f):
    """Wrap f so its first call records every frozen_value() result and every
    later call replays them. Use around loss closures handed to
    finite_diff_check when the graph contains stop-gradient or quantization."""
    cache = NondiffCache()

    def wrapped(*args):
        with _frozen(cache):
            return f(*args)

    return wrapped


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity; contributes zero gradient to x."""
    data = frozen_value(lambda: x.data.copy())
    return Tensor(data)


def straight_through(value: Tensor, carrier: Tensor) -> Tensor:
    """Forward is exactly value; the gradient passes through to carrier
    unchanged and value receives none.

    Under nondiff freezing the forward becomes carrier + (value - carrier at
    record time), the linearization the backward pass differentiates, so
    finite differences agree with the analytic gradient.
    """
    if value.shape != carrier.shape:
        raise ShapeError(f"straight_through shapes differ: {value.shape} vs {carrier.shape}")
    _check_same_dtype(value, carrier)
    if _freeze_stack:
        offset = frozen_value(lambda: value.data - carrier.data)
        data = carrier.data + offset
    else:
        data = value.data.copy()
    return _result(data, (carrier,), (lambda g: g,))


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable
    requires_grad tensor.

    Grads of reachable tensors are zero-initialized first, so each backward
    reports exactly this graph's gradients; unreachable tensors keep their
    previous (or absent) grad. A second call on the same loss is an error.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise GraphError("backward called twice on the same graph; rerun the forward pass")
    loss._spent = True

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad:
                stack.append(p)

    for t in nodes:
        if t.requires_grad:
            t.grad = np.zeros_like(t.data)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad = loss.grad + np.ones_like(loss.data)

    for t in sorted(nodes, key=lambda n: n._seq, reverse=True):
        if t.grad is None:
            continue
        for p, vjp in zip(t._parents, t._vjps):
            if p.requires_grad:
                p.grad = p.grad + vjp(t.grad)


# ---------------------------------------------------------------------------
# numerical oracle


def finite_diff_check(f, x: Tensor, eps: float) -> float:
    """Max over elements of |analytic - central difference| / max(1, |central|).

    f must be pure and deterministic; wrap it with freeze_nondiff if the graph
    contains stop-gradient or quantization choices.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("f must return a scalar Tensor")
    if not np.isfinite(out.data).all():
        raise ValueError("f returned a non-finite value")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = f(Tensor((flat + bump).reshape(x.shape))).item()
        lo = f(Tensor((flat - bump).reshape(x.shape))).item()
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError("f returned a non-finite value during differencing")
        fd = (hi - lo) / (2.0 * eps)
        err = abs(float(analytic.reshape(-1)[i]) - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
