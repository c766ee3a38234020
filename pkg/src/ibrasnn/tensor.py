"""Dense tensors with a recording tape for reverse-mode differentiation.

Values are numpy arrays wrapped in :class:`Tensor`.  Operations executed
while a :class:`Tape` is active, and touching at least one tensor with
``requires_grad=True``, are appended to that tape together with a closure
that maps the output gradient to input gradients.  ``Tape.backward`` walks
the entries in exact reverse recording order.

Only elementwise ops on equal shapes are supported, plus the per-channel
bias add built into :func:`linear`, :func:`conv2d` and the batch-norm ops.
Anything else needs an explicit :func:`reshape`.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ShapeError

DTYPES = {
    "real32": np.dtype(np.float32),
    "real64": np.dtype(np.float64),
    "int32": np.dtype(np.int32),
    "bit": np.dtype(np.uint8),
}

_ids = itertools.count(1)
_tape_stack: list["Tape"] = []
_default_real = ["real32"]


@contextmanager
def precision(name: str):
    """Temporarily change the dtype used for real-valued tensors."""
    if name not in ("real32", "real64"):
        raise ValueError(f"unknown precision {name!r}")
    _default_real.append(name)
    try:
        yield
    finally:
        _default_real.pop()


def default_real() -> np.dtype:
    return DTYPES[_default_real[-1]]


def dtype_name(dt) -> str:
    dt = np.dtype(dt)
    for name, d in DTYPES.items():
        if d == dt:
            return name
    raise TypeError(f"unsupported dtype {dt}")


class Tensor:
    """An immutable n-dimensional array with an identity for gradient lookup.

    Parameters are the one exception to immutability: optimizers rebind
    their storage through :meth:`assign`, keeping the id stable.
    """

    __slots__ = ("_data", "id", "requires_grad", "name")

    def __init__(self, data, dtype: str | None = None, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            if arr.dtype == np.bool_:
                dtype = "bit"
            elif np.issubdtype(arr.dtype, np.integer):
                dtype = "int32"
            else:
                dtype = _default_real[-1]
        if dtype not in DTYPES:
            raise TypeError(f"unknown dtype {dtype!r}")
        arr = np.array(arr, dtype=DTYPES[dtype], copy=True)
        if dtype == "bit" and arr.size and arr.max() > 1:
            raise ValueError("bit tensor may only hold 0 and 1")
        arr.flags.writeable = False
        self._data = arr
        self.id = next(_ids)
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t._data = arr
        t.id = next(_ids)
        t.requires_grad = requires_grad
        t.name = name
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def dtype(self) -> str:
        return dtype_name(self._data.dtype)

    @property
    def size(self) -> int:
        return self._data.size

    def assign(self, arr: np.ndarray) -> None:
        arr = np.array(arr, dtype=self._data.dtype, copy=True)
        if arr.shape != self._data.shape:
            raise ShapeError(f"cannot assign shape {arr.shape} to tensor of shape {self._data.shape}")
        arr.flags.writeable = False
        self._data = arr

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return self._data.item()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data, name: str | None = None, dtype: str | None = None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    input_requires: tuple[bool, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    input_dtypes: tuple = ()


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def record(self, op, inputs, output, backward):
        self.entries.append(
            TapeEntry(
                op=op,
                inputs=tuple(t.id for t in inputs),
                input_requires=tuple(t.requires_grad for t in inputs),
                output=output.id,
                backward=backward,
                input_dtypes=tuple(t.data.dtype for t in inputs),
            )
        )

    def is_topological(self) -> bool:
        produced = {}
        for k, e in enumerate(self.entries):
            for i in e.inputs:
                if produced.get(i, -1) >= k:
                    return False
            produced[e.output] = k
        return True

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of the scalar ``loss`` w.r.t. every tensor on the tape."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for e in reversed(self.entries):
            g = grads.get(e.output)
            if g is None:
                continue
            for tid, req, dt, gi in zip(e.inputs, e.input_requires, e.input_dtypes, e.backward(g)):
                if gi is None or not req:
                    continue
                gi = np.asarray(gi, dtype=dt)
                prev = grads.get(tid)
                grads[tid] = gi if prev is None else prev + gi
        return {k: Tensor._wrap(v) for k, v in grads.items()}


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, Tensor]:
    if tape is None:
        if not _tape_stack:
            raise RuntimeError("backward called with no active tape")
        tape = _tape_stack[-1]
    return tape.backward(loss)


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, bwd) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=requires)
    if requires and _tape_stack:
        _tape_stack[-1].record(op, inputs, result, bwd)
    return result


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# elementwise --------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    x, y = a.data, b.data
    return _emit("mul", (a, b), x * y, lambda g: (g * y, g * x))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _emit("relu", (a,), np.maximum(x, 0), lambda g: (g * (x > 0),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    out = np.clip(x, lo, hi).astype(x.dtype, copy=False)
    return _emit("clip", (a,), out, lambda g: (g * inside,))


def custom_grad_apply(x: Tensor, forward: Callable, backward_window: Callable) -> Tensor:
    """Apply ``forward`` pointwise, but backpropagate through ``backward_window(x)``.

    The true derivative of ``forward`` is ignored: the upstream gradient is
    multiplied elementwise by the window evaluated at the input.
    """
    xd = x.data
    out = np.asarray(forward(xd)).astype(xd.dtype, copy=False)
    if out.shape != xd.shape:
        raise ShapeError(f"custom_grad_apply: forward changed shape {xd.shape} -> {out.shape}")

    def bwd(g):
        return (g * np.asarray(backward_window(xd), dtype=xd.dtype),)

    return _emit("custom_grad", (x,), out, bwd)


# reductions and shape ------------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dt = a.shape, a.data.dtype
    return _emit("sum", (a,), np.asarray(a.data.sum(), dtype=dt), lambda g: (np.full(shape, g, dtype=dt),))


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / max(a.size, 1))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def mean_of(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors (timestep readout)."""
    first = tensors[0]
    for t in tensors[1:]:
        _same_shape("mean_of", first, t)
    k = len(tensors)
    out = np.mean(np.stack([t.data for t in tensors]), axis=0).astype(first.data.dtype)
    return _emit("mean_of", tuple(tensors), out, lambda g: tuple(g / k for _ in range(k)))


# layers -------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [n] or [B, n]."""
    xd, w = x.data, weight.data
    if w.ndim != 2 or xd.ndim not in (1, 2) or xd.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input shape {xd.shape} incompatible with weight shape {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} incompatible with weight shape {w.shape}")
    out = xd @ w.T
    if bias is not None:
        out = out + bias.data
    single = xd.ndim == 1

    def bwd(g):
        g2 = g[None] if single else g
        x2 = xd[None] if single else xd
        gx = g2 @ w
        gw = g2.T @ x2
        gb = g2.sum(axis=0)
        return (gx[0] if single else gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", inputs, out, bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, input [Cin,H,W] or [B,Cin,H,W], weight [Cout,Cin,kh,kw]."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    xd, w = x.data, weight.data
    if w.ndim != 4 or xd.ndim not in (3, 4) or xd.shape[-3] != w.shape[1]:
        raise ShapeError(f"conv2d: input shape {xd.shape} incompatible with weight shape {w.shape}")
    single = xd.ndim == 3
    xb = xd[None] if single else xd
    ct = np.promote_types(xb.dtype, w.dtype) if np.issubdtype(xb.dtype, np.floating) else w.dtype
    xb, w = xb.astype(ct, copy=False), w.astype(ct, copy=False)
    H, W = xb.shape[2] + 2 * padding, xb.shape[3] + 2 * padding
    if H < w.shape[2] or W < w.shape[3]:
        raise ShapeError(f"conv2d: input shape {xd.shape} smaller than kernel of weight shape {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} incompatible with weight shape {w.shape}")
    out = kernels.conv2d_forward(xb, w, stride, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if single:
        out = out[0]

    def bwd(g):
        gb4 = g[None] if single else g
        gx = kernels.conv2d_grad_input(gb4, w, xb.shape, stride, padding)
        gw = kernels.conv2d_grad_weight(gb4, xb, w.shape, stride, padding)
        gb = gb4.sum(axis=(0, 2, 3))
        return (gx[0] if single else gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, out, bwd)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    xd = x.data
    if xd.ndim != 4 or xd.shape[2] % k or xd.shape[3] % k:
        raise ShapeError(f"avg_pool2d: input shape {xd.shape} not divisible by pool size {k}")
    B, C, H, W = xd.shape
    out = xd.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5)).astype(xd.dtype)

    def bwd(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return _emit("avg_pool2d", (x,), out, bwd)


def _channel_view(arr_1d, ndim):
    return arr_1d.reshape((1, -1) + (1,) * (ndim - 2))


def _bn_axes(ndim):
    return (0,) if ndim == 2 else (0, 2, 3)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalize with batch statistics; returns (output, batch mean, batch variance)."""
    xd = x.data
    if xd.ndim not in (2, 4) or gamma.shape != (xd.shape[1],) or beta.shape != (xd.shape[1],):
        raise ShapeError(f"batch_norm: input shape {xd.shape} incompatible with channel params {gamma.shape}")
    axes = _bn_axes(xd.ndim)
    m = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - _channel_view(mu, xd.ndim)) * _channel_view(inv, xd.ndim)
    out = xhat * _channel_view(gamma.data, xd.ndim) + _channel_view(beta.data, xd.ndim)
    gam = gamma.data

    def bwd(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * _channel_view(gam, xd.ndim)
        gx = (
            _channel_view(inv / m, xd.ndim)
            * (m * gxhat - _channel_view(gxhat.sum(axis=axes), xd.ndim)
               - xhat * _channel_view((gxhat * xhat).sum(axis=axes), xd.ndim))
        )
        return (gx, ggamma, gbeta)

    y = _emit("batch_norm_train", (x, gamma, beta), out.astype(xd.dtype), bwd)
    return y, mu, var


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, mean_: np.ndarray, var: np.ndarray, eps: float) -> Tensor:
    xd = x.data
    if xd.ndim not in (2, 4) or gamma.shape != (xd.shape[1],):
        raise ShapeError(f"batch_norm: input shape {xd.shape} incompatible with channel params {gamma.shape}")
    axes = _bn_axes(xd.ndim)
    inv = (1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + eps)).astype(xd.dtype)
    xhat = (xd - _channel_view(np.asarray(mean_, dtype=xd.dtype), xd.ndim)) * _channel_view(inv, xd.ndim)
    out = xhat * _channel_view(gamma.data, xd.ndim) + _channel_view(beta.data, xd.ndim)
    gam = gamma.data

    def bwd(g):
        return (g * _channel_view(gam * inv, xd.ndim), (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _emit("batch_norm_eval", (x, gamma, beta), out.astype(xd.dtype), bwd)


# losses -------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = logits.data
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits shape {z.shape} incompatible with labels shape {y.shape}")
    ls = log_softmax(z)
    B = z.shape[0]
    loss = -ls[np.arange(B), y].mean()

    def bwd(g):
        p = np.exp(ls)
        p[np.arange(B), y] -= 1
        return (p * (g / B),)

    return _emit("cross_entropy", (logits,), np.asarray(loss, dtype=z.dtype), bwd)
