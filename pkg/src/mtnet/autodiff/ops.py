"""Differentiable operations on :class:`~mtnet.autodiff.tensor.Tensor`.

Volumes use the layout ``(N, C, D, H, W)``. Every function returns a new
tensor; inputs are never mutated.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_node


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _triple(v, name: str) -> tuple[int, int, int]:
    if np.isscalar(v):
        v = (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ShapeError(f"{name} must be an int or a triple, got {v}")
    return v


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_5d(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what} expects a (N, C, D, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _binary_shapes(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _binary_shapes(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _binary_shapes(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _binary_shapes(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_node(out, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node(x.data * x.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def abs_(x: Tensor) -> Tensor:
    # np.sign(0) == 0 gives the zero subgradient at ties
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of a non-positive value")
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """``max(x, lo)``; gradient flows only where ``x > lo``."""
    keep = x.data > lo
    out = np.where(keep, x.data, x.dtype.type(lo))
    return make_node(out, (x,), lambda g: (g * keep,), "clamp_min")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_node(x.data * pos, (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis of an ``(N, K)`` tensor."""
    if x.ndim != 2:
        raise ShapeError(f"softmax expects (N, K), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum_all(x: Tensor) -> Tensor:
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_node(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw, "mean")


def mean_axis(x: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    n = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return make_node(out, (x,), bw, "mean_axis")


def max_axis(x: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return make_node(out, (x,), bw, "max_axis")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def select(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""
    out = x.data[i].copy()

    def bw(g):
        full = np.zeros_like(x.data)
        full[i] = g
        return (full,)

    return make_node(out, (x,), bw, "select")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape {t.shape} does not match {ref} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: non-channel dims differ, {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


def broadcast_mul_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply each channel of ``x`` (N, C, ...) by ``gate`` (N, C)."""
    if gate.ndim != 2 or gate.shape != x.shape[:2]:
        raise ShapeError(f"gate shape {gate.shape} does not match channels of {x.shape}")
    return mul(x, reshape(gate, gate.shape + (1,) * (x.ndim - 2)))


# ---------------------------------------------------------------------------
# dense


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_node(out, parents, bw, "dense")


# ---------------------------------------------------------------------------
# 3D convolution


def _im2col(xp: np.ndarray, ksize, stride):
    """Columns of shape (C*kd*kh*kw, N*D'*H'*W') from a padded volume.

    Output voxels are the fast axis so the gather copies contiguous rows.
    """
    sd, sh, sw = stride
    win = sliding_window_view(xp, ksize, axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    do, ho, wo = win.shape[2:5]
    cols = win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(-1, xp.shape[0] * do * ho * wo)
    return cols, (do, ho, wo)


def _conv_forward(x: np.ndarray, k: np.ndarray, stride, padding):
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if any(padding) else x
    cols, (do, ho, wo) = _im2col(xp, k.shape[2:], stride)
    out = k.reshape(k.shape[0], -1) @ cols
    out = out.reshape(k.shape[0], x.shape[0], do, ho, wo).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(out), cols, xp.shape


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, D, H, W) with ``kernel`` (F, C, kd, kh, kw)."""
    _check_5d(x, "conv3d")
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d kernel must be (F, C, kd, kh, kw), got {kernel.shape}")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    n, c, *spatial = x.shape
    f, kc, *ks = kernel.shape
    if kc != c:
        raise ShapeError(f"conv3d: kernel expects {kc} input channels, input has {c}")
    if min(stride) < 1:
        raise ShapeError(f"conv3d: stride must be >= 1, got {stride}")
    if min(padding) < 0:
        raise ShapeError(f"conv3d: padding must be >= 0, got {padding}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv3d: bias {bias.shape} does not match {f} filters")
    out_dims = [(s + 2 * p - k) // st + 1 for s, p, k, st in zip(spatial, padding, ks, stride)]
    if any(s + 2 * p - k < 0 for s, p, k in zip(spatial, padding, ks)) or min(out_dims) < 1:
        raise ShapeError(
            f"conv3d: kernel {tuple(ks)} larger than padded input {tuple(spatial)} (padding {padding})"
        )

    out, cols, xp_shape = _conv_forward(x.data, kernel.data, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, f, 1, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gf = g.transpose(1, 0, 2, 3, 4).reshape(f, -1)
        gk = (gf @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = _conv_input_grad(g, gf, kernel.data, x.shape, xp_shape, stride, padding) if x.requires_grad else None
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return make_node(out, parents, bw, "conv3d")


def _conv_input_grad(g, gf, k, x_shape, xp_shape, stride, padding):
    ks = k.shape[2:]
    full_pad = tuple(kk - 1 - p for kk, p in zip(ks, padding))
    if stride == (1, 1, 1) and min(full_pad) >= 0:
        # stride 1: the adjoint is a full correlation with the flipped kernel
        kt = np.ascontiguousarray(k[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        gx, _, _ = _conv_forward(g, kt, (1, 1, 1), full_pad)
        return gx
    n, c = x_shape[:2]
    f = k.shape[0]
    do, ho, wo = g.shape[2:]
    sd, sh, sw = stride
    dcols = (k.reshape(f, -1).T @ gf).reshape((c,) + ks + (n, do, ho, wo))
    dxp = np.zeros((c, n) + tuple(xp_shape[2:]), dtype=g.dtype)
    for a in range(ks[0]):
        for b in range(ks[1]):
            for e in range(ks[2]):
                dxp[:, :, a:a + sd * (do - 1) + 1:sd, b:b + sh * (ho - 1) + 1:sh,
                    e:e + sw * (wo - 1) + 1:sw] += dcols[:, a, b, e]
    pd, ph, pw = padding
    dxp = dxp[:, :, pd:pd + x_shape[2], ph:ph + x_shape[3], pw:pw + x_shape[4]]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3, 4))


# ---------------------------------------------------------------------------
# resampling and pooling


def upsample3d_nearest(x: Tensor, factor=2) -> Tensor:
    _check_5d(x, "upsample3d_nearest")
    fd, fh, fw = _triple(factor, "factor")
    if min(fd, fh, fw) < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {(fd, fh, fw)}")
    out = x.data.repeat(fd, axis=2).repeat(fh, axis=3).repeat(fw, axis=4)
    n, c, d, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, d, fd, h, fh, w, fw).sum(axis=(3, 5, 7)),)

    return make_node(out, (x,), bw, "upsample3d")


def _blocks(x: Tensor, window, what: str):
    _check_5d(x, what)
    wd, wh, ww = _triple(window, "window")
    n, c, d, h, w = x.shape
    if min(wd, wh, ww) < 1 or d % wd or h % wh or w % ww:
        raise ShapeError(f"{what}: window {(wd, wh, ww)} does not divide spatial dims {(d, h, w)}")
    shape = (n, c, d // wd, wd, h // wh, wh, w // ww, ww)
    blocks = x.data.reshape(shape).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return blocks.reshape(n, c, d // wd, h // wh, w // ww, wd * wh * ww), (wd, wh, ww)


def _unblock(gb: np.ndarray, x_shape, window) -> np.ndarray:
    n, c, d, h, w = x_shape
    wd, wh, ww = window
    gb = gb.reshape(n, c, d // wd, h // wh, w // ww, wd, wh, ww).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(gb.reshape(x_shape))


def avgpool3d(x: Tensor, window=2) -> Tensor:
    blocks, win = _blocks(x, window, "avgpool3d")
    size = blocks.shape[-1]
    out = blocks.mean(axis=-1)

    def bw(g):
        gb = np.broadcast_to((g / size)[..., None], blocks.shape)
        return (_unblock(gb, x.shape, win),)

    return make_node(out, (x,), bw, "avgpool3d")


def maxpool3d(x: Tensor, window=2) -> Tensor:
    blocks, win = _blocks(x, window, "maxpool3d")
    # argmax returns the first maximum in row-major window order
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (_unblock(gb, x.shape, win),)

    return make_node(out, (x,), bw, "maxpool3d")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_5d(x, "global_avg_pool")
    n, c = x.shape[:2]
    return reshape(mean_axis(reshape(x, (n, c, -1)), axis=2, keepdims=False), (n, c))


def global_max_pool(x: Tensor) -> Tensor:
    _check_5d(x, "global_max_pool")
    n, c = x.shape[:2]
    return max_axis(reshape(x, (n, c, -1)), axis=2, keepdims=False)
