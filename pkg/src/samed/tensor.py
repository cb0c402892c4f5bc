"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its result with numpy and, when a tape is
active and at least one input is tracked, appends a record holding the
vector-Jacobian closure. ``GradTape.backward`` replays the records in reverse.

Shapes never broadcast implicitly. The only broadcasting op is ``add_bias``,
whose second operand must match the trailing extents of the first.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "GradError",
    "Tensor",
    "GradTape",
    "no_tape",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "add_bias",
    "transpose",
    "reshape",
    "concat",
    "take",
    "expand",
    "sum",
    "mean",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "gelu",
    "layernorm",
    "one_hot",
    "bilinear_upsample",
    "nearest_downsample",
]


class ShapeError(ValueError):
    """Operand extents do not fit the op."""


class GradError(RuntimeError):
    """Misuse of the differentiation machinery."""


_DTYPES = (np.float32, np.float64)


class Tensor:
    """Numeric array plus an optional gradient buffer.

    ``data`` is treated as immutable once a tensor has been used in a recorded
    op; optimizers replace parameter values in place only between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        if self._tape is None:
            raise GradError("tensor was not produced under an active tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _active_tape() -> GradTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Ordered record of differentiable ops executed inside ``with tape:``.

    Tapes are per-thread and rebuilt for each forward pass.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> GradTape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op, inputs, output, vjp) -> None:
        output._tape = self
        self.entries.append(TapeEntry(op, tuple(inputs), output, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

        Grads add across calls; callers zero them between steps.
        """
        if loss.data.size != 1 or loss.ndim > 1:
            raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise GradError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = pending.pop(id(entry.output), None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.vjp(g)):
                if gi is None or not inp.tracked:
                    continue
                if inp._tape is None:
                    # leaf
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
                    else:
                        inp.grad += gi
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi


class no_tape:
    """Suspend recording on the current thread."""

    def __enter__(self):
        self._saved = getattr(_local, "stack", None)
        _local.stack = []
        return self

    def __exit__(self, *exc):
        _local.stack = self._saved


def _finish(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    t = Tensor(out)
    tape = _active_tape()
    if tape is not None and any(i.tracked for i in inputs):
        tape.record(op, inputs, t, vjp)
    return t


def _check_dtype(*ts: Tensor) -> None:
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise ShapeError(f"dtype mismatch: {d} vs {t.dtype}")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    _check_dtype(a, b)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) extents must match."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_dtype(a, b)
    A, B = a.data, b.data

    def vjp(g):
        return (
            np.matmul(g, np.swapaxes(B, -1, -2)) if a.tracked else None,
            np.matmul(np.swapaxes(A, -1, -2), g) if b.tracked else None,
        )

    return _finish("matmul", np.matmul(A, B), (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (..., C_in) and weight (C_out, C_in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    _check_dtype(x, weight)
    X, W = x.data, weight.data
    out = X @ W.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = g @ W if x.tracked else None
        gw = None
        if weight.tracked:
            gw = g.reshape(-1, g.shape[-1]).T @ X.reshape(-1, X.shape[-1])
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.tracked else None
        return gx, gw, gb

    return _finish("linear", out, inputs, vjp)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _finish("mul", A * B, (a, b), lambda g: (g * B, g * A))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    A, B = a.data, b.data
    out = A / B
    return _finish("div", out, (a, b), lambda g: (g / B, -g * out / B))


def neg(a: Tensor) -> Tensor:
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _finish("add_scalar", a.data + a.dtype.type(c), (a,), lambda g: (g,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add ``bias`` along the trailing axes of ``x`` (the one permitted broadcast)."""
    n = bias.ndim
    if n > x.ndim or x.shape[x.ndim - n :] != bias.shape:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match trailing extents of {x.shape}")
    _check_dtype(x, bias)
    lead = x.ndim - n

    def vjp(g):
        return g, (g.sum(axis=tuple(range(lead))) if lead else g) if bias.tracked else None

    return _finish("add_bias", x.data + bias.data, (x, bias), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    A = a.data
    return _finish("log", np.log(A), (a,), lambda g: (g / A,))


_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    A = a.data
    cdf = 0.5 * (1.0 + erf(A * _SQRT1_2))
    out = A * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * A * A)
        return (g * (cdf + A * pdf),)

    return _finish("gelu", out.astype(A.dtype, copy=False), (a,), vjp)


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(tuple(shape))
    return _finish("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(ts: Sequence[Tensor], axis: int) -> Tensor:
    ts = tuple(ts)
    _check_dtype(*ts)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat", out, ts, vjp)


def take(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    src_shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _finish("take", np.ascontiguousarray(a.data[idx]), (a,), vjp)


def expand(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis of length ``n``."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _finish("expand", out, (a,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    src = a.shape
    out = np.sum(a.data, axis=axis)
    axes = tuple(range(a.ndim)) if axis is None else tuple(np.atleast_1d(axis) % a.ndim)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src).copy(),)

    return _finish("sum", np.asarray(out, dtype=a.dtype), (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = tuple(range(a.ndim)) if axis is None else tuple(np.atleast_1d(axis) % a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axes), 1.0 / n)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax. NaN inputs propagate NaN."""
    out = a.data - np.max(a.data, axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= np.sum(out, axis=axis, keepdims=True)

    def vjp(g):
        gi = g * out
        gi -= out * np.sum(gi, axis=axis, keepdims=True)
        return (gi,)

    return _finish("softmax", out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _finish("log_softmax", out, (a,), vjp)


def layernorm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply learnable scale and shift."""
    c = x.shape[-1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layernorm: params {weight.shape}/{bias.shape} do not fit {x.shape}")
    _check_dtype(x, weight, bias)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    W = weight.data
    out = xhat * W + bias.data

    def vjp(g):
        gx = gw = gb = None
        flat_g = g.reshape(-1, c)
        if weight.tracked:
            gw = (flat_g * xhat.reshape(-1, c)).sum(axis=0)
        if bias.tracked:
            gb = flat_g.sum(axis=0)
        if x.tracked:
            gh = g * W
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _finish("layernorm", out, (x, weight, bias), vjp)


# ---------------------------------------------------------------------------
# constants and resampling
# ---------------------------------------------------------------------------


def one_hot(labels, k: int, dtype=np.float64) -> Tensor:
    """Untracked (..., k) indicator tensor for integer labels in [0, k)."""
    labels = np.asarray(labels)
    bad = np.argwhere((labels < 0) | (labels >= k))
    if bad.size:
        raise ValueError(f"label {labels[tuple(bad[0])]} at pixel {tuple(int(i) for i in bad[0])} "
                         f"outside [0, {k})")
    return Tensor(np.eye(k, dtype=dtype)[labels])


def _align_corners_index(n_out: int, n_in: int):
    """Lower knot index and fractional offset for align-corners sampling."""
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.int64), np.zeros(n_out)
    num = np.arange(n_out, dtype=np.int64) * (n_in - 1)
    lo = num // (n_out - 1)
    frac = (num % (n_out - 1)) / (n_out - 1)
    return lo, frac


def _lerp_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    lo, frac = _align_corners_index(n_out, n_in)
    hi = np.minimum(lo + 1, n_in - 1)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    f = frac.astype(arr.dtype).reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    # a + f*(b - a) keeps constants and knot samples bit-exact
    return a + f * (b - a)


def _lerp_axis_adjoint(g: np.ndarray, n_in: int, axis: int) -> np.ndarray:
    n_out = g.shape[axis]
    lo, frac = _align_corners_index(n_out, n_in)
    hi = np.minimum(lo + 1, n_in - 1)
    m = np.zeros((n_in, n_out), dtype=g.dtype)
    np.add.at(m, (lo, np.arange(n_out)), 1.0 - frac)
    np.add.at(m, (hi, np.arange(n_out)), frac)
    moved = np.moveaxis(g, axis, -1) @ m.T
    return np.moveaxis(moved, -1, axis)


def bilinear_upsample(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Align-corners bilinear resize of (..., H, W, C) to (..., size[0], size[1], C).

    Output pixel ``i`` samples source position ``i * (h - 1) / (H - 1)``, so the
    four corners map onto each other. Only upscaling (or identity) is allowed.
    """
    if x.ndim < 3:
        raise ShapeError(f"bilinear_upsample expects (..., H, W, C), got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    H, W = size
    if H < h or W < w:
        raise ShapeError(f"bilinear_upsample cannot shrink {(h, w)} to {(H, W)}; "
                         "use nearest_downsample")
    ax_h, ax_w = x.ndim - 3, x.ndim - 2
    out = _lerp_axis(_lerp_axis(x.data, H, ax_h), W, ax_w)

    def vjp(g):
        return (_lerp_axis_adjoint(_lerp_axis_adjoint(g, w, ax_w), h, ax_h),)

    return _finish("bilinear_upsample", out, (x,), vjp)


def nearest_downsample(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of integer maps (..., H, W) under the align-corners grid.

    Output pixel ``i`` takes the source pixel nearest ``i * (H - 1) / (h - 1)``,
    ties rounding up, which keeps labels aligned with ``bilinear_upsample``.
    """
    labels = np.asarray(labels)
    H, W = labels.shape[-2:]
    h, w = size
    if h > H or w > W:
        raise ShapeError(f"nearest_downsample cannot grow {(H, W)} to {(h, w)}")

    def idx(n_out, n_in):
        if n_out == 1:
            return np.zeros(1, dtype=np.int64)
        num = np.arange(n_out, dtype=np.int64) * (n_in - 1)
        return (2 * num + (n_out - 1)) // (2 * (n_out - 1))

    return labels[..., idx(h, H)[:, None], idx(w, W)[None, :]]
