"""Differentiable ops on :class:`~mtgan.tensor.Tensor`.

Image tensors are N x C x H x W. Convolution is cross-correlation (no kernel
flip). Binary elementwise ops accept two tensors of identical shape or a
tensor and a Python scalar.
"""

from __future__ import annotations

from numbers import Number
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DimensionError, Tensor

__all__ = [
    "add", "sub", "mul", "div", "neg", "abs", "exp", "log", "square", "sqrt",
    "tanh", "sigmoid", "relu", "leaky_relu", "softplus", "sum", "mean",
    "reshape", "getitem", "concat_channels", "upsample_nearest",
    "reflection_pad2d", "conv2d", "conv2d_transpose", "avg_pool2d",
    "instance_norm", "conv_output_size",
]


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        axes = [i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y]
        if a.ndim != b.ndim:
            raise DimensionError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape} on axes {axes}")


def _require_4d(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected N x C x H x W input, got shape {x.shape}")


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return Tensor._from_op(a.data + b, "add_scalar", (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return Tensor._from_op(a.data - b, "sub_scalar", (a,), lambda g: (g,))
    _check_same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return Tensor._from_op(a.data * b, "mul_scalar", (a,), lambda g: (g * b,))
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return mul(a, 1.0 / b)
    _check_same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._from_op(out, "div", (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


def abs(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    s = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), "abs", (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.log(ad), "log", (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, "square", (a,), lambda g: (2 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, "tanh", (a,), lambda g: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._from_op(out, "sigmoid", (a,), lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    # the kink at 0 takes the negative-side slope
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return Tensor._from_op(a.data * factor, "leaky_relu", (a,), lambda g: (g * factor,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return Tensor._from_op(out, "softplus", (a,), lambda g: (g * _sigmoid(x),))


# -- reductions and reshaping -------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=a.dtype), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), "reshape", (a,),
                           lambda g: (g.reshape(old),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(a.data[index]), "getitem", (a,), backward)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise DimensionError("concat_channels: empty input list")
    ref = tensors[0]
    for t in tensors:
        _require_4d("concat_channels", t)
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref.shape[0], ref.shape[2], ref.shape[3]):
            raise DimensionError(
                f"concat_channels: non-channel axes differ, {t.shape} vs {ref.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return Tensor._from_op(out, "concat", tuple(tensors),
                           lambda g: tuple(np.split(g, splits, axis=1)))


def upsample_nearest(a: Tensor, scale: int) -> Tensor:
    _require_4d("upsample_nearest", a)
    n, c, h, w = a.shape
    out = np.broadcast_to(a.data[:, :, :, None, :, None],
                          (n, c, h, scale, w, scale)).reshape(n, c, h * scale, w * scale)

    def backward(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return Tensor._from_op(np.ascontiguousarray(out), "upsample_nearest", (a,), backward)


def reflection_pad2d(a: Tensor, pad) -> Tensor:
    """Reflect-pad the spatial axes; ``pad`` is an int or (top, bottom, left, right)."""
    _require_4d("reflection_pad2d", a)
    top, bottom, left, right = (pad,) * 4 if isinstance(pad, int) else pad
    h, w = a.shape[2:]
    if max(top, bottom) >= h or max(left, right) >= w:
        raise DimensionError(
            f"reflection_pad2d: pad {(top, bottom, left, right)} too large for {h}x{w}")
    out = np.pad(a.data, ((0, 0), (0, 0), (top, bottom), (left, right)), mode="reflect")

    def backward(g):
        g = g.copy()
        # fold reflected borders back onto their sources, outermost first
        for i in range(top):
            g[:, :, 2 * top - i, :] += g[:, :, i, :]
        hh = g.shape[2]
        for i in range(bottom):
            src = hh - 1 - i
            g[:, :, hh - 1 - bottom - (bottom - i), :] += g[:, :, src, :]
        g = g[:, :, top:hh - bottom, :]
        for j in range(left):
            g[:, :, :, 2 * left - j] += g[:, :, :, j]
        ww = g.shape[3]
        for j in range(right):
            src = ww - 1 - j
            g[:, :, :, ww - 1 - right - (right - j)] += g[:, :, :, src]
        return (np.ascontiguousarray(g[:, :, :, left:ww - right]),)

    return Tensor._from_op(out, "reflection_pad2d", (a,), backward)


# -- convolution ----------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (c, kh, kw, n, ho, wo),
                      (s1, s2, s3, s0, s2 * stride, s3 * stride), writeable=False)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = _windows(_pad(x, padding), kh, kw, stride, ho, wo).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        xp = xp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(xp)


def _conv_core(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    cout, _, kh, kw = w.shape
    n = x.shape[0]
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = (w.reshape(cout, -1) @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def _conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int):
    cout, _, kh, kw = w.shape
    n, _, ho, wo = g.shape
    gm = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
    dcols = w.reshape(cout, -1).T @ gm
    return _col2im(dcols, x_shape, kh, kw, stride, padding, ho, wo)


def _conv_weight_grad(g: np.ndarray, cols: np.ndarray, w_shape):
    cout = w_shape[0]
    gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
    return (gm @ cols.T).reshape(w_shape)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of N x Cin x H x W with Cout x Cin x kh x kw, zero padded."""
    _require_4d("conv2d", x)
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be Cout x Cin x kh x kw, got {weight.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: bad stride {stride} / padding {padding}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input channels (axis 1) {cin} != weight Cin (axis 1) {wcin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        bad = [ax for ax, (k, s) in (("H", (kh, h)), ("W", (kw, w))) if k > s + 2 * padding]
        raise DimensionError(f"conv2d: kernel {kh}x{kw} exceeds padded input on axes {bad}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    out, cols = _conv_core(x.data, weight.data, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    wd = weight.data

    def backward(g):
        gx = _conv_input_grad(g, wd, x.shape, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(g, cols, wd.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, "conv2d", parents, backward)


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is Cin x Cout x kh x kw.

    Output size is (H - 1) * stride - 2 * padding + kh + output_padding.
    """
    _require_4d("conv2d_transpose", x)
    if weight.ndim != 4:
        raise DimensionError(
            f"conv2d_transpose: weight must be Cin x Cout x kh x kw, got {weight.shape}")
    if stride < 1 or padding < 0 or not 0 <= output_padding < stride or output_padding > 0 and stride == 1:
        raise DimensionError(
            f"conv2d_transpose: bad stride {stride} / padding {padding} / "
            f"output_padding {output_padding}")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(
            f"conv2d_transpose: input channels (axis 1) {cin} != weight Cin (axis 0) {wcin}")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d_transpose: empty output {ho}x{wo}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d_transpose: bias shape {bias.shape} != ({cout},)")

    out_shape = (n, cout, ho, wo)
    wd = weight.data
    out = _conv_input_grad(x.data, wd, out_shape, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gx, _ = _conv_core(g, wd, stride, padding)
        if weight.requires_grad:
            cols, _, _ = _im2col(g, kh, kw, stride, padding)
            gw = _conv_weight_grad(x.data, cols, wd.shape)
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, "conv2d_transpose", parents, backward)


def avg_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    _require_4d("avg_pool2d", x)
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    sh, sw = (kh, kw) if stride is None else ((stride, stride) if isinstance(stride, int) else stride)
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise DimensionError(f"avg_pool2d: kernel {kh}x{kw} larger than input {h}x{w}")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    scale = 1.0 / (kh * kw)
    xd = x.data
    if (sh, sw) == (kh, kw) and h % kh == 0 and w % kw == 0:
        out = xd.reshape(n, c, ho, kh, wo, kw).mean(axis=(3, 5), dtype=xd.dtype)

        def backward(g):
            gg = np.broadcast_to((g * scale)[:, :, :, None, :, None], (n, c, ho, kh, wo, kw))
            return (np.ascontiguousarray(gg).reshape(n, c, h, w),)
    else:
        s0, s1, s2, s3 = xd.strides
        win = as_strided(xd, (n, c, ho, wo, kh, kw), (s0, s1, s2 * sh, s3 * sw, s2, s3),
                         writeable=False)
        out = win.mean(axis=(4, 5), dtype=xd.dtype)

        def backward(g):
            gx = np.zeros_like(xd)
            gs = g * scale
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gs
            return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), "avg_pool2d", (x,), backward)


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                  eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalization with optional per-channel affine."""
    _require_4d("instance_norm", x)
    n, c, h, w = x.shape
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (c,):
            raise DimensionError(f"instance_norm: {name} shape {p.shape} != ({c},)")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_arr = gamma.data[None, :, None, None] if gamma is not None else None
    out = xhat * g_arr if g_arr is not None else xhat.copy()
    if beta is not None:
        out += beta.data[None, :, None, None]

    def backward(g):
        dxhat = g * g_arr if g_arr is not None else g
        gx = inv * (dxhat - dxhat.mean(axis=(2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = tuple(p for p in (x, gamma, beta) if p is not None)
    return Tensor._from_op(out, "instance_norm", parents, backward)
