"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records one forward pass as a flat list of nodes in execution
order, which is by construction a topological order of the compute graph.
:func:`backward` walks that list once in reverse, so every node's adjoint is
complete before its vector-Jacobian product runs. Tensors created without a
tape are inert constants and contribute no nodes, which lets the same
operations serve both traced (training) and plain numpy (inference) paths.

Only the operations needed by the motion network, the surface fitter and the
direct-fit baseline are provided. Everything is float64 end to end so that
central-difference gradient checks hold to tight tolerances.
"""

from __future__ import annotations

import weakref
from typing import Iterable, Sequence

import numpy as np


class Tape:
    """Ordered record of operations for a single forward pass."""

    def __init__(self):
        self.nodes = []  # (out_id, in_ids, vjp)
        self._next_id = 0

    def fresh_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """Float64 array tracked on a tape.

    ``tape=None`` marks a constant: it gets no id and no gradient flows into
    it. Arithmetic operators dispatch to the module-level ops.

    The tape is held through a weak reference. Recorded vjp closures capture
    their input tensors, so a strong back-reference would tie every tensor
    and the tape into one big reference cycle that only the cyclic collector
    could free; training loops would then hold several dead graphs in memory
    at once. With the weak link, dropping the tape frees the whole graph
    promptly.
    """

    __slots__ = ("data", "_tape_ref", "id")

    # make numpy defer to the reflected operators instead of coercing
    __array_ufunc__ = None

    def __init__(self, data, tape: Tape | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self._tape_ref = None if tape is None else weakref.ref(tape)
        self.id = tape.fresh_id() if tape is not None else None

    @property
    def tape(self) -> Tape | None:
        return None if self._tape_ref is None else self._tape_ref()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = "const" if self.tape is None else f"id={self.id}"
        return f"Tensor({tag}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def value(x) -> np.ndarray:
    """Unwrap a Tensor (or pass an ndarray through)."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _record(tape: Tape | None, out: Tensor, ins: Sequence[Tensor], vjp):
    if tape is not None:
        tape.nodes.append((out.id, tuple(t.id for t in ins), vjp))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an upstream gradient down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, out: Tensor, frozen_ids: Iterable[int] = ()) -> dict:
    """Accumulate gradients of a scalar output w.r.t. every tape tensor.

    Returns a dict mapping tensor id to gradient array. Ids listed in
    ``frozen_ids`` are forced to zero after accumulation; ids with no path to
    the output are simply absent (treat as zero). Each recorded node is
    visited at most once, in reverse order of recording.
    """
    if not isinstance(out, Tensor) or out.tape is not tape:
        raise ValueError("output tensor is not recorded on this tape")
    if out.data.shape != ():
        raise ValueError("backward requires a scalar output")
    grads: dict[int, np.ndarray] = {out.id: np.ones((), dtype=np.float64)}
    for out_id, in_ids, vjp in reversed(tape.nodes):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for iid, gi in zip(in_ids, vjp(g)):
            if iid is None or gi is None:
                continue
            acc = grads.get(iid)
            grads[iid] = gi if acc is None else acc + gi
    for fid in frozen_ids:
        if fid in grads:
            grads[fid] = np.zeros_like(grads[fid])
    return grads


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data + b.data, tape)
    sa, sb = a.data.shape, b.data.shape
    _record(tape, out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data - b.data, tape)
    sa, sb = a.data.shape, b.data.shape
    _record(tape, out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data * b.data, tape)
    sa, sb = a.data.shape, b.data.shape
    da, db = a.data, b.data
    _record(tape, out, (a, b),
            lambda g: (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb)))
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data / b.data, tape)
    sa, sb = a.data.shape, b.data.shape
    da, db = a.data, b.data
    _record(tape, out, (a, b),
            lambda g: (_unbroadcast(g / db, sa),
                       _unbroadcast(-g * da / (db * db), sb)))
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, a.tape)
    _record(a.tape, out, (a,), lambda g: (-g,))
    return out


def _unary(a, fn, dfn) -> Tensor:
    a = as_tensor(a)
    y = fn(a.data)
    out = Tensor(y, a.tape)
    da = a.data
    _record(a.tape, out, (a,), lambda g: (g * dfn(da, y),))
    return out


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def sqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a) -> Tensor:
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a) -> Tensor:
    def fwd(x):
        # piecewise form avoids overflow in exp for large |x|
        p = np.empty_like(x)
        pos = x >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        p[~pos] = ex / (1.0 + ex)
        return p

    return _unary(a, fwd, lambda x, y: y * (1.0 - y))


def silu(a) -> Tensor:
    """x * sigmoid(x); the smooth ReLU-family activation used throughout."""
    a = as_tensor(a)
    x = a.data
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
    out = Tensor(x * s, a.tape)
    _record(a.tape, out, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def linear(x, w, b=None) -> Tensor:
    """Affine map on the last axis: ``y[..., j] = sum_i x[..., i] w[i, j] + b[j]``."""
    x, w = as_tensor(x), as_tensor(w)
    ins = [x, w]
    if b is not None:
        b = as_tensor(b)
        ins.append(b)
    tape = _tape_of(*ins)
    cin = x.data.shape[-1]
    x2 = x.data.reshape(-1, cin)
    y2 = x2 @ w.data
    if b is not None:
        y2 = y2 + b.data
    out_shape = x.data.shape[:-1] + (w.data.shape[1],)
    out = Tensor(y2.reshape(out_shape), tape)
    wd = w.data
    xshape = x.data.shape

    def vjp(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xshape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    _record(tape, out, ins, vjp)
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    out = Tensor(x.data.reshape(shape), x.tape)
    _record(x.tape, out, (x,), lambda g: (g.reshape(old),))
    return out


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    tape = _tape_of(*parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tape)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    _record(tape, out, parts, lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def col(x, j: int) -> Tensor:
    """Select index ``j`` of the last axis, dropping that axis."""
    x = as_tensor(x)
    out = Tensor(x.data[..., j], x.tape)
    shape = x.data.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[..., j] = g
        return (gx,)

    _record(x.tape, out, (x,), vjp)
    return out


def take0(x, idx) -> Tensor:
    """Gather rows along axis 0 with an integer index array of any shape."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    out = Tensor(x.data[idx], x.tape)
    shape = x.data.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=np.float64)
        np.add.at(gx, idx, g)
        return (gx,)

    _record(x.tape, out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# reductions


def _expand_axes(g, axis, keepdims):
    if keepdims or axis is None:
        return g
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in sorted(a if a >= 0 else a for a in axes):
        g = np.expand_dims(g, ax)
    return g


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), x.tape)
    shape = x.data.shape
    _record(x.tape, out, (x,),
            lambda g: (np.broadcast_to(_expand_axes(g, axis, keepdims), shape).copy(),))
    return out


def mean_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims), x.tape)
    shape = x.data.shape
    n = x.data.size / max(out.data.size, 1)

    def vjp(g):
        return (np.broadcast_to(_expand_axes(g, axis, keepdims), shape) / n,)

    _record(x.tape, out, (x,), vjp)
    return out


def max_(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties route the gradient to the first maximum."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    out = Tensor(y if keepdims else y.squeeze(axis), x.tape)
    shape = x.data.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=np.float64)
        ge = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), ge, axis=axis)
        return (gx,)

    _record(x.tape, out, (x,), vjp)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, x.tape)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _record(x.tape, out, (x,), vjp)
    return out
