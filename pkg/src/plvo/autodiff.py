"""A small reverse-mode autodiff engine over dense float64 arrays.

Operations are recorded on the active :class:`Tape` (if any) and
differentiated with :func:`backward`. With no tape active the same functions
are plain numpy forward passes, which is how inference runs.

Broadcasting is deliberately limited to adding a 1-D bias to every row of a
matrix; everything else must match shape exactly.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch

_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    __slots__ = ("data", "id")

    def __init__(self, data):
        arr = np.array(data, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        self.data = arr
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr):
        # internal constructor for op outputs; skips the copy
        t = cls.__new__(cls)
        t.data = arr
        t.id = next(_ids)
        return t

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: int
    vjp: object


class Tape:
    """Ordered log of primitive operations; use as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, inputs, out_arr, vjp):
    out = Tensor._wrap(out_arr)
    tape = active_tape()
    if tape is not None:
        tape.records.append(_Record(op, tuple(t.id for t in inputs), out.id, vjp))
    return out


def _shape_error(op, *tensors):
    shapes = ", ".join(str(t.shape) for t in tensors)
    return ShapeMismatch(f"{op}: incompatible shapes {shapes}")


# -- primitives ---------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    A, B = a.data, b.data
    return _record("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def _binary_shapes(op, a, b):
    if a.shape == b.shape:
        return False
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return True
    raise _shape_error(op, a, b)


def add(a, b):
    """Elementwise sum; ``b`` may also be a row bias of length ``a.shape[1]``."""
    a, b = as_tensor(a), as_tensor(b)
    bias = _binary_shapes("add", a, b)
    if bias:
        return _record("add", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=0)))
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    bias = _binary_shapes("sub", a, b)
    if bias:
        return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g.sum(axis=0)))
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)
    A, B = a.data, b.data
    return _record("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a, s: float):
    a = as_tensor(a)
    s = float(s)
    return _record("scale", (a,), a.data * s, lambda g: (g * s,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    A = a.data
    if np.any(A <= 0):
        raise ValueError("log of non-positive entry")
    return _record("log", (a,), np.log(A), lambda g: (g / A,))


def clamp_min(a, floor: float):
    a = as_tensor(a)
    keep = a.data >= floor
    return _record("clamp_min", (a,), np.where(keep, a.data, floor), lambda g: (g * keep,))


def softmax_rows(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise _shape_error("softmax_rows", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _record("softmax_rows", (a,), s,
                   lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def logsumexp_rows(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise _shape_error("logsumexp_rows", a)
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return _record("logsumexp_rows", (a,), out, lambda g: (soft * g[:, None],))


def concat(tensors, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *tensors) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _record("concat", tuple(tensors), out, vjp)


def slice_(a, index):
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(0, 2), 3))``."""
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record("slice", (a,), np.array(out), vjp)


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise _shape_error("transpose", a)
    return _record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def sum_(a):
    a = as_tensor(a)
    shape = a.shape
    return _record("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def gather(a, rows, cols):
    """Vector of ``a[rows[k], cols[k]]``."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _record("gather", (a,), a.data[rows, cols], vjp)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


# -- reverse pass ---------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, wrt=None):
    """Gradients of a scalar ``loss`` with respect to ``wrt`` tensors.

    Returns a list aligned with ``wrt`` (zeros for tensors the loss does not
    depend on). Without ``wrt`` returns a dict keyed by tensor id.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads = {loss.id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        for tid, gi in zip(rec.inputs, rec.vjp(g)):
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
    if wrt is None:
        return grads
    return [np.array(grads[t.id], dtype=float).reshape(t.shape) if t.id in grads
            else np.zeros(t.shape) for t in wrt]


# -- optimiser ------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3, beta1=0.9,
              beta2=0.999, eps=1e-8):
    """One Adam update over dicts of named arrays. Returns (params, state)."""
    t = state.t + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if np.shape(g) != np.shape(p):
            raise ShapeMismatch(f"adam_step: gradient for {name!r} has shape {np.shape(g)}, "
                                f"parameter has {np.shape(p)}")
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(m_out, v_out, t)
