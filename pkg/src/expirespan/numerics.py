"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Everything is float64.  A :class:`Tape` records every operation whose inputs
require gradients while it is active; ``Tape.backward`` replays the records in
reverse.  Operations executed with no active tape are plain numpy calls.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {self.name or ''}".strip())
        return self

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


class _Record:
    __slots__ = ("inputs", "out", "fn")

    def __init__(self, inputs, out, fn):
        self.inputs = inputs
        self.out = out
        self.fn = fn


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations are recorded only while it is the
    innermost active tape.
    """

    def __init__(self):
        self.ops: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, inputs: Sequence[Tensor], out: Tensor, fn: Callable) -> None:
        out.tape = self
        self.ops.append(_Record(tuple(inputs), out, fn))

    def reset(self) -> None:
        self.ops.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.ops:
            raise RuntimeError("backward called on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self.ops):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            if rec.out.requires_grad:
                rec.out.accumulate(g)
            in_grads = rec.fn(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                seen[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # leaves: tensors never produced by a recorded op
        for key, g in grads.items():
            seen[key].accumulate(g)


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: Tensor) -> None:
    tape = loss.tape or active_tape()
    if tape is None:
        raise RuntimeError("loss was not produced under a Tape")
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence, fn: Callable) -> Tensor:
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(inputs, out, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def clamp01ramp(a) -> Tensor:
    """max(0, min(1, x)); gradient 1 strictly inside (0, 1), else 0."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(np.maximum(x, 0.0), 1.0)
    inside = (x > 0.0) & (x < 1.0)
    return _make(out, (a,), lambda g: (g * inside,))


def cap(a, limit: float) -> Tensor:
    """min(x, limit) with gradient passed only where x < limit."""
    a = as_tensor(a)
    x = a.data
    below = x < limit
    return _make(np.minimum(x, limit), (a,), lambda g: (g * below,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), fn)


# ---------------------------------------------------------------- structure


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), fn)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), fn)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis) / float(n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, fn)


def slice_axis(a, start: int, stop: int, axis: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), fn)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup; backward scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), fn)


def take_last(a, idx: np.ndarray) -> Tensor:
    """Gather along the last axis with an integer index array (any shape)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, (..., idx), g)
        return (full,)

    return _make(a.data[..., idx], (a,), fn)


# ---------------------------------------------------------------- composite


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    y = _softmax(a.data, axis)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), fn)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (a, gain, bias), fn)


def cross_entropy(logits, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood (nats) over positions where mask is true.

    ``logits`` is (N, V); ``targets`` integer (N,).  With an all-false mask the
    loss is an exact zero.
    """
    logits = as_tensor(logits)
    x = logits.data
    n, v = x.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    count = int(m.sum())
    safe_t = np.where(m, targets, 0)
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), safe_t]
    denom = max(count, 1)
    loss = float((nll * m).sum() / denom)

    def fn(g):
        p = _softmax(x, 1)
        p[np.arange(n), safe_t] -= 1.0
        return (p * (m[:, None] * (g / denom)),)

    return _make(np.asarray(loss), (logits,), fn)


def dropout(a, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-rate) at train, identity at eval."""
    a = as_tensor(a)
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout at train time needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- verification


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-6,
    exclude: Optional[np.ndarray] = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is |analytic - numeric| / max(1, |numeric|).
    Coordinates flagged in ``exclude`` (e.g. kinks) are skipped.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps outside [1e-7, 1e-3]")
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape():
        y = f(xt)
        y.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    def value(arr):
        out = f(Tensor(arr)).data
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("function is not finite at a probe point")
        return float(out)

    skip = np.zeros(base.shape, dtype=bool) if exclude is None else np.asarray(exclude, dtype=bool)
    worst = 0.0
    for j in np.ndindex(*base.shape):
        if skip[j]:
            continue
        xp = base.copy()
        xp[j] += eps
        xm = base.copy()
        xm[j] -= eps
        num = (value(xp) - value(xm)) / (2 * eps)
        err = abs(analytic[j] - num) / max(1.0, abs(num))
        worst = max(worst, err)
    return worst
