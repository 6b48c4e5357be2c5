"""Dense tensors with tape-based reverse-mode differentiation.

Storage is float32 by default; reductions accumulate in float64.  A
``GradTape`` records every primitive applied to tensors that require
gradients while the tape is active::

    with GradTape() as tape:
        loss = (x * x).sum()
    grads = backward(loss, tape)

Outside an active tape nothing is recorded, which is the inference path.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

_ACTIVE_TAPES: list["GradTape"] = []
_DEBUG_FINITE = False


def set_debug_finite(enabled: bool) -> None:
    """Toggle per-op NaN/Inf checking (off by default)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


@contextmanager
def debug_finite():
    prev = _DEBUG_FINITE
    set_debug_finite(True)
    try:
        yield
    finally:
        set_debug_finite(prev)


class Tensor:
    """An n-d float array that may participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of primitive ops, consumed by exactly one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._produced: set[int] = set()

    def __enter__(self) -> "GradTape":
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def op_names(self) -> list[str]:
        return [n.op for n in self.nodes]


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from op '{op}'")
    out = Tensor(data, dtype=data.dtype)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        tape = _ACTIVE_TAPES[-1]
        out.requires_grad = True
        tape.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
        tape._produced.add(id(out))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_dtype(a: Tensor, b: Tensor):
    return np.result_type(a.data, b.data)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def bw(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _make("silu", out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)  # python float keeps float32 inputs float32


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _make("gelu", out.astype(x.dtype, copy=False), (a,), bw)


# ----------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = (a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64) / count).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _make("mean", np.asarray(out), (a,), bw)


# ----------------------------------------------------------------- structural

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make("transpose", out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tensors, bw)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = a.data[sl]

    def bw(g):
        grad = np.zeros(a.shape, dtype=g.dtype)
        grad[sl] = g
        return (grad,)

    return _make("slice", out, (a,), bw)


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.int64)
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        grad = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0) if g.ndim else g)
        return (grad,)

    return _make("take", out, (a,), bw)


# ------------------------------------------------------------------ linalg

def matmul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} x {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return _make("linear", out, inputs, bw)


def softmax_lastdim(x: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    ``bias`` is a constant additive logit offset (may hold ``-inf`` for hard
    masking); it never receives a gradient.
    """
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax over an empty last axis")
    z = x.data if bias is None else x.data + bias
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    y = e * (1.0 / s).astype(x.dtype)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (y * (g - dot),)

    return _make("softmax", y, (x,), bw)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Affine-free normalisation over the last axis (statistics in float64)."""
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * rstd
    out = xhat.astype(x.dtype)

    def bw(g):
        gd = g.astype(np.float64)
        gm = gd.mean(axis=-1, keepdims=True)
        gxm = (gd * xhat).mean(axis=-1, keepdims=True)
        return ((rstd * (gd - gm - xhat * gxm)).astype(x.dtype),)

    return _make("layer_norm", out, (x,), bw)


def _rotate_pairs(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    out[..., 0::2] = -a[..., 1::2]
    out[..., 1::2] = a[..., 0::2]
    return out


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive feature pairs: ``(x0, x1) -> (x0 c - x1 s, x1 c + x0 s)``."""
    cos = cos.astype(x.dtype, copy=False)
    sin = sin.astype(x.dtype, copy=False)
    out = x.data * cos + _rotate_pairs(x.data) * sin

    def bw(g):
        # transpose of the pair rotation is its negation
        return (g * cos - _rotate_pairs(g * sin),)

    return _make("rope", out, (x,), bw)


# ----------------------------------------------------------------- backward

def backward(loss: Tensor, tape: GradTape, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape``; returns leaf -> gradient.

    With ``params`` given, exactly those tensors are reported (zeros when the
    loss does not depend on them).  Otherwise every requires-grad leaf met on
    the tape is reported.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a backward pass")
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in tape._produced:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = ig if prev is None else prev + ig
    if params is None:
        return {t: grads[k].astype(t.dtype, copy=False) for k, t in leaves.items()}
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = np.zeros(p.shape, dtype=p.dtype) if g is None else g.astype(p.dtype, copy=False)
    return out


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float | None = None,
    indices: Sequence[int] | None = None,
) -> float:
    """Max over coordinates of ``|g_ad - g_fd| / max(1, |g_fd|)``.

    ``g_fd`` uses central differences.  ``indices`` restricts the check to a
    subset of flat coordinates (useful for large parameter tensors).
    """
    if step is None:
        step = 1e-5 if x.dtype == np.float64 else 1e-3
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    with GradTape() as tape:
        y = f(probe)
    if y.size != 1:
        raise TapeError(f"finite_diff_check needs a scalar function, got shape {y.shape}")
    g_ad = backward(y, tape, [probe])[probe].reshape(-1)

    flat = probe.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(probe.data, dtype=x.dtype)).data.reshape(-1)[0])
        flat[i] = orig - step
        fm = float(f(Tensor(probe.data, dtype=x.dtype)).data.reshape(-1)[0])
        flat[i] = orig
        g_fd = (fp - fm) / (2.0 * step)
        err = abs(float(g_ad[i]) - g_fd) / max(1.0, abs(g_fd))
        worst = max(worst, err)
    return worst
