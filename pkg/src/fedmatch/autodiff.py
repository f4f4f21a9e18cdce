"""Reverse-mode differentiation over a small set of dense float64 kernels.

Each kernel computes its forward value with numpy and, when a :class:`GradTape`
is active and any input requires a gradient, records a closure that maps the
output gradient back onto the inputs.  ``GradTape.backward`` replays those
closures in reverse execution order.

    with GradTape() as tape:
        y = linear(x, W, b)
        loss = sum_all(y)
    tape.backward(loss)
    W.grad  # d loss / d W
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_active_tape: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "fedmatch_grad_tape", default=None
)


class Tensor:
    """A float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Op:
    __slots__ = ("backward", "inputs", "output")

    def __init__(self, backward, inputs, output):
        self.backward = backward
        self.inputs = inputs
        self.output = output


class GradTape:
    """Ordered record of executed kernels; confine one instance to one thread."""

    def __init__(self):
        self.ops: list[_Op] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, backward: Callable, inputs: Sequence[Tensor], output: Tensor) -> None:
        self.ops.append(_Op(backward, tuple(inputs), output))

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(output.data)
        output.grad = np.asarray(grad, dtype=np.float64)
        for op in reversed(self.ops):
            g = op.output.grad
            if g is None:
                continue
            grads = op.backward(g)
            for inp, gi in zip(op.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


def custom_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result and record ``backward(grad_out) -> input grads``.

    Recording only happens inside an active tape and when some input
    requires a gradient; otherwise the result is a plain constant.
    """
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(backward, inputs, out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------- #
# kernels
# --------------------------------------------------------------------------- #
def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``out[..., k] = sum_j W[k, j] * x[..., j] + b[k]``.

    A 1-D ``W`` of length ``d_in`` projects to a scalar per row, with a
    0-d ``b``; this is the form the scoring head uses.
    """
    xd, Wd = x.data, W.data
    if Wd.ndim not in (1, 2):
        raise ValueError(f"linear: W must be 1-D or 2-D, got shape {Wd.shape}")
    d_in = Wd.shape[-1]
    if xd.shape[-1] != d_in:
        raise ValueError(
            f"linear: x has trailing dimension {xd.shape[-1]} but W has shape "
            f"{Wd.shape} (expects {d_in})"
        )
    if b is not None:
        expected = () if Wd.ndim == 1 else (Wd.shape[0],)
        if b.data.shape != expected:
            raise ValueError(f"linear: b has shape {b.data.shape}, expected {expected}")

    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, d_in)  # one 2-D GEMM beats a batched 3-D matmul
    if Wd.ndim == 2:
        out = (x2 @ Wd.T).reshape(lead + (Wd.shape[0],))
    else:
        out = xd @ Wd
    if b is not None:
        out = out + b.data
    inputs = (x, W) if b is None else (x, W, b)

    def backward(g):
        if Wd.ndim == 2:
            g2 = g.reshape(-1, Wd.shape[0])
            gx = (g2 @ Wd).reshape(xd.shape) if x.requires_grad else None
            gW = g2.T @ x2 if W.requires_grad else None
            gb = g2.sum(axis=0) if b is not None else None
        else:
            gx = g[..., None] * Wd if x.requires_grad else None
            gW = g.reshape(-1) @ xd.reshape(-1, d_in) if W.requires_grad else None
            gb = np.asarray(g.sum()) if b is not None else None
        return (gx, gW) if b is None else (gx, gW, gb)

    return custom_op(out, inputs, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a[..., m, k] @ b[..., k, n]`` with identical leading dims."""
    ad, bd = a.data, b.data
    if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast over ``a``'s leading axes."""
    out = a.data + b.data
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return custom_op(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * c
    return custom_op(out, (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.data.shape
    out = x.data.reshape(shape)
    return custom_op(out, (x,), lambda g: (g.reshape(src),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    out = np.swapaxes(x.data, a1, a2)
    return custom_op(out, (x,), lambda g: (np.swapaxes(g, a1, a2),))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    exactly zero weight.  Every slice must keep at least one True entry.
    """
    xd = x.data
    if xd.shape[-1] < 1:
        raise ValueError("softmax: empty trailing axis")
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    if d < 2:
        raise ValueError("layer_norm: trailing dimension must be at least 2")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = None
        if x.requires_grad:
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = g.reshape(-1, d)
        ggain = (lead * xhat.reshape(-1, d)).sum(axis=0)
        gbias = lead.sum(axis=0)
        return gx, ggain, gbias

    return custom_op(out, (x, gain, bias), backward)


def gelu_value(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + _GELU_A * x * x)))


def activation(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + _GELU_A * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * (_GELU_C * (1.0 + 3.0 * _GELU_A * x2))
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return custom_op(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)].flat[0]
        raise IndexError(f"embedding: id {int(bad)} outside table of {n} rows")
    out = table.data[ids]

    def backward(g):
        d = table.data.shape[1]
        flat = (ids.reshape(-1, 1) * d + np.arange(d)).reshape(-1)
        gt = np.bincount(flat, weights=g.reshape(-1), minlength=n * d)
        return (gt.reshape(n, d),)

    return custom_op(out, (table,), backward)


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """Take one position along ``axis`` (dropping that axis)."""
    out = np.take(x.data, index, axis=axis)
    src = x.data.shape

    def backward(g):
        gx = np.zeros(src)
        sl = [slice(None)] * len(src)
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return custom_op(out, (x,), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[start:stop]
    src = x.data.shape

    def backward(g):
        gx = np.zeros(src)
        gx[start:stop] = g
        return (gx,)

    return custom_op(out, (x,), backward)


def narrow(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Keep positions ``start:stop`` along ``axis`` (the axis is retained)."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = x.data[sl]
    src = x.data.shape

    def backward(g):
        gx = np.zeros(src)
        gx[sl] = g
        return (gx,)

    return custom_op(out, (x,), backward)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``x[index]`` of a 1-D tensor; repeated indices accumulate."""
    index = np.asarray(index, dtype=np.int64)
    n = x.data.shape[0]
    out = x.data[index]

    def backward(g):
        return (np.bincount(index, weights=g, minlength=n).astype(np.float64),)

    return custom_op(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    src = x.data.shape
    return custom_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),))


# --------------------------------------------------------------------------- #
# verification
# --------------------------------------------------------------------------- #
def grad_check(
    fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5, floor: float = 1e-6
) -> float:
    """Max relative disagreement between tape gradients and central differences.

    ``fn`` takes no arguments and returns a scalar Tensor built from
    ``params``.  Each element is compared as
    ``|a - n| / max(|a|, |n|, floor)``.  The floor keeps near-zero gradient
    entries (where central differences are pure roundoff, about
    ``eps * |f| / step``) from dominating; below it the check is absolute.
    """
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    with GradTape() as tape:
        out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check: fn must return a scalar")
    tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            err = abs(af[i] - num) / max(abs(af[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
