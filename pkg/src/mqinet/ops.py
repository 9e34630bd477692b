"""Differentiable kernels.

Every kernel takes :class:`~mqinet.tensor.Tensor` inputs, computes its result
with numpy in the inputs' dtype, and registers a backward closure through
:func:`~mqinet.tensor.emit`.

Broadcasting is deliberately narrow.  In ``add``/``sub``/``mul`` the second
operand ``b`` may broadcast against ``a`` when both have the same rank and
every extent of ``b`` either equals the one in ``a`` or is 1 (so ``(C,1,1)``
against ``(C,H,W)``, ``(B,C,1,1)`` against ``(B,C,H,W)`` and ``(1,C,H,W)``
against ``(B,C,H,W)`` are all fine).  The output always has ``a``'s shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf, expit

from .tensor import Tensor, emit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    if a.ndim != b.ndim or any(bb not in (1, aa) for aa, bb in zip(a.shape, b.shape)):
        raise ValueError(f"{kind}: cannot broadcast {b.shape} against {a.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return emit("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return emit("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return emit("mul", ad * bd, (a, b),
                lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def scale(a: Tensor, s: float) -> Tensor:
    return emit("scale", a.data * a.dtype.type(s), (a,), lambda g: (g * a.dtype.type(s),))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return emit("add_scalar", a.data + a.dtype.type(s), (a,), lambda g: (g,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return emit("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


# -- reductions -------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    return emit("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return emit("mean", np.asarray(a.data.sum() / n, dtype=a.dtype), (a,),
                lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def global_avg_pool(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C) spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    n = H * W

    def bw(g):
        return (np.broadcast_to((g / n)[:, :, None, None], x.shape).copy(),)

    return emit("gap", x.data.reshape(B, C, n).sum(axis=2) / n, (x,), bw)


# -- shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"{axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return emit("permute", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return permute(x, axes)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return emit("slice", x.data[index].copy(), (x,), bw)


def split_channels(x: Tensor, k: int) -> list:
    """Split axis 1 into ``k`` contiguous equal blocks, in order."""
    C = x.shape[1]
    if k < 1 or C % k:
        raise ValueError(f"cannot split {C} channels into {k} equal parts")
    step = C // k
    return [slice_axis(x, 1, i * step, (i + 1) * step) for i in range(k)]


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat of nothing")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(p.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat: shape {p.shape} incompatible with {ref} on axis {axis}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return emit("concat", np.concatenate([p.data for p in parts], axis=axis), parts, bw)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product (B,M,K) x (B,K,N) -> (B,M,N)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return emit("matmul", ad @ bd, (a, b), bw)


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def depthwise_conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 cross-correlation, zero padding 1, stride 1."""
    if x.ndim != 4 or k.shape != (x.shape[1], 3, 3):
        raise ValueError(f"depthwise_conv2d: kernel {k.shape} does not fit input {x.shape}")
    if bias is not None and bias.shape != (x.shape[1],):
        raise ValueError(f"depthwise_conv2d: bias {bias.shape} for {x.shape[1]} channels")
    B, C, H, W = x.shape
    xp = _pad1(x.data)
    kd = k.data
    out = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out += kd[None, :, i, j, None, None] * xp[:, :, i:i + H, j:j + W]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + H, j:j + W] += kd[None, :, i, j, None, None] * g
                gk[:, i, j] = (g * xp[:, :, i:i + H, j:j + W]).sum(axis=(0, 2, 3))
        grads = [gxp[:, :, 1:H + 1, 1:W + 1].copy(), gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, k) if bias is None else (x, k, bias)
    return emit("dwconv", out, inputs, bw)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense 3x3 convolution (Cout,Cin,3,3), zero padding 1, stride 1."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3):
        raise ValueError(f"conv2d: weight {w.shape} does not fit input {x.shape}")
    B, Cin, H, W = x.shape
    Cout = w.shape[0]
    xp = _pad1(x.data)
    # columns ordered (cin, i, j) to match w.reshape(Cout, Cin*9)
    cols = np.stack([xp[:, :, i:i + H, j:j + W] for i in range(3) for j in range(3)], axis=2)
    cols = cols.reshape(B, Cin * 9, H * W)
    w2 = w.data.reshape(Cout, Cin * 9)
    out = (w2 @ cols).reshape(B, Cout, H, W)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        g2 = g.reshape(B, Cout, H * W)
        gw = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = (w2.T @ g2).reshape(B, Cin, 9, H, W)
        gxp = np.zeros_like(xp)
        for n, (i, j) in enumerate((i, j) for i in range(3) for j in range(3)):
            gxp[:, :, i:i + H, j:j + W] += gcols[:, :, n]
        grads = [gxp[:, :, 1:H + 1, 1:W + 1].copy(), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return emit("conv2d", out, inputs, bw)


def pointwise_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel linear map with weight (Cout, Cin)."""
    if x.ndim != 4 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ValueError(f"pointwise_conv2d: weight {w.shape} does not fit input {x.shape}")
    B, Cin, H, W = x.shape
    Cout = w.shape[0]
    xd = x.data.reshape(B, Cin, H * W)
    wd = w.data
    out = (wd @ xd).reshape(B, Cout, H, W)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        g2 = g.reshape(B, Cout, H * W)
        grads = [(wd.T @ g2).reshape(x.shape), (g2 @ xd.transpose(0, 2, 1)).sum(axis=0)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return emit("pwconv", out, inputs, bw)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """(B,Cin) -> (B,Cout) with weight (Cout,Cin)."""
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ValueError(f"linear: weight {w.shape} does not fit input {x.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data[None, :]

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return emit("linear", out, inputs, bw)


# -- nonlinearities ---------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return emit("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(x.dtype),)

    return emit("gelu", (xd * cdf).astype(x.dtype), (x,), bw)


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return emit("softmax", p, (x,), bw)


# -- resampling -------------------------------------------------------------

def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) linear-interpolation matrix, align-corners convention."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m.astype(dtype)


def bilinear_resize(x: Tensor, h1: int, w1: int) -> Tensor:
    """Resize the last two axes of ``x`` to (h1, w1), align-corners bilinear."""
    if h1 < 1 or w1 < 1:
        raise ValueError(f"target size must be positive, got {h1}x{w1}")
    h0, w0 = x.shape[-2:]
    if (h0, w0) == (h1, w1):
        return emit("resize", x.data.copy(), (x,), lambda g: (g,))
    ry = resize_matrix(h0, h1, x.dtype)
    rx = resize_matrix(w0, w1, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def bw(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return emit("resize", out, (x,), bw)
