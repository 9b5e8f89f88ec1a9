"""Differentiable operations on :class:`Tensor`.

Broadcasting is limited to python scalars and the explicit :func:`expand`
op; every other binary op requires equal shapes. Reductions accumulate in
float64 and cast back to the operand dtype.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_result


def _acc_sum(a: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.sum(a, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype, copy=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, "operand shapes differ", expected=a.shape, got=b.shape)


# -- elementwise binary -------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _same_shape("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data - c, (a,), lambda g: (g,), "sub_scalar")
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data / c, (a,), lambda g: (g / c,), "div_scalar")
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return make_result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def cast(x: Tensor, dtype) -> Tensor:
    src = x.dtype
    return make_result(x.data.astype(dtype), (x,), lambda g: (g.astype(src),), "cast")


# -- elementwise unary ----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log: non-positive input")
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sgn = np.sign(x.data)
    return make_result(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient passes only where the input was inside the bounds."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        inside &= xd >= lo
    if hi is not None:
        inside &= xd <= hi
    return make_result(out, (x,), lambda g: (g * inside,), "clamp")


# -- shape manipulation --------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", str(exc), expected=src, got=tuple(shape)) from None
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape`` along its size-1 axes (same rank required)."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError("expand", "can only expand size-1 axes of equal rank", expected=shape, got=x.shape)
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(x.data, shape).copy()
    return make_result(out, (x,), lambda g: (_acc_sum(g, axis=axes, keepdims=True),), "expand")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis % len(ref)):
            raise ShapeError("concat", "non-concatenated axes must agree", expected=ref, got=t.shape)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels", "expects 4-D tensors", expected=4, got=(a.ndim, b.ndim))
    return concat([a, b], axis=1)


# -- reductions ----------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    out = _acc_sum(x.data, axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(x.dtype),)

    return make_result(np.asarray(out), (x,), _bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / _acc_sum(e, axis=axis, keepdims=True)

    def _bw(g):
        return (y * (g - _acc_sum(g * y, axis=axis, keepdims=True)),)

    return make_result(y, (x,), _bw, "softmax")


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product or batched 3-D product with matching batch extents."""
    if a.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ShapeError("matmul", "operands must both be 2-D or both 3-D", got=(a.shape, b.shape))
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError("matmul", "inner dimensions disagree", expected=a.shape, got=b.shape)
    ad, bd = a.data, b.data

    def _bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_result(ad @ bd, (a, b), _bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` for ``x`` of shape [N, D] and ``w`` of shape [D, E]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", "inner dimensions disagree", expected=(x.shape[-1:], "x [N,D], w [D,E]"), got=w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("linear", "bias length", expected=(w.shape[1],), got=b.shape)
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def _bw(g):
        gx = g @ wd.T
        gw = xd.T @ g
        if b is None:
            return gx, gw
        return gx, gw, _acc_sum(g, axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, _bw, "linear")


# -- convolution ---------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    x: [B, Cin, H, W]; w: [Cout, Cin, kh, kw]; b: [Cout].
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", "expects 4-D input and weight", got=(x.shape, w.shape))
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    if Cin != C:
        raise ShapeError("conv2d", "input channels", expected=Cin, got=C)
    if b is not None and b.shape != (Cout,):
        raise ShapeError("conv2d", "bias length", expected=(Cout,), got=b.shape)
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError("conv2d", "kernel larger than padded input", expected=(Hp, Wp), got=(kh, kw))
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(Cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        dxp = np.zeros((B, C, Hp, Wp), dtype=np.result_type(g.dtype, wmat.dtype))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        if b is None:
            return gx, gw
        return gx, gw, _acc_sum(g2, axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, _bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel size equal to stride (non-overlapping).

    x: [B, Cin, H, W]; w: [Cin, Cout, k, k] with k == stride; output [B, Cout, H*k, W*k].
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv_transpose2d", "expects 4-D input and weight", got=(x.shape, w.shape))
    B, C, H, W = x.shape
    Cin, Cout, kh, kw = w.shape
    if Cin != C:
        raise ShapeError("conv_transpose2d", "input channels", expected=Cin, got=C)
    if kh != stride or kw != stride:
        raise ShapeError("conv_transpose2d", "kernel must equal stride", expected=(stride, stride), got=(kh, kw))
    k = stride
    xm = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    wmat = w.data.reshape(C, Cout * k * k)
    out = (xm @ wmat).reshape(B, H, W, Cout, k, k).transpose(0, 3, 1, 4, 2, 5).reshape(B, Cout, H * k, W * k)
    if b is not None:
        out = out + b.data.reshape(1, Cout, 1, 1)

    def _bw(g):
        gm = g.reshape(B, Cout, H, k, W, k).transpose(0, 2, 4, 1, 3, 5).reshape(B * H * W, Cout * k * k)
        gx = (gm @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        gw = (xm.T @ gm).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, _acc_sum(g, axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, _bw, "conv_transpose2d")


# -- pooling / resampling --------------------------------------------------------


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Global average over the spatial axes: [B, C, H, W] -> [B, C, 1, 1]."""
    if x.ndim != 4:
        raise ShapeError("adaptive_avg_pool", "expects a 4-D tensor", expected=4, got=x.ndim)
    H, W = x.shape[2:]
    out = _acc_sum(x.data, axis=(2, 3), keepdims=True) / (H * W)

    def _bw(g):
        return (np.broadcast_to(g / (H * W), x.shape).astype(x.dtype),)

    return make_result(out.astype(x.dtype), (x,), _bw, "adaptive_avg_pool")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("upsample_nearest", "expects a 4-D tensor", expected=4, got=x.ndim)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def _bw(g):
        return (_acc_sum(g.reshape(B, C, H, factor, W, factor), axis=(3, 5)),)

    return make_result(out, (x,), _bw, "upsample_nearest")
