"""Fused primitives with hand-written backward passes."""

from __future__ import annotations

import functools
import math

import numpy as np

from ..errors import ShapeError
from . import counter
from .tensor import Tensor, as_tensor, make_node, sqrt, unbroadcast

LAYER_NORM_EPS = 1e-5
INSTANCE_NORM_EPS = 1e-5


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., M, K] @ b[..., K, N]`` with broadcast batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    if counter.active():
        m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
        counter.record("matmul", 2 * math.prod(out.shape[:-2]) * m * k * n, out.size)

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make_node(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., C] @ w[C, O] (+ b[O])`` as one tape node."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    return _affine(x, w.data, w, b, transposed=False)


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution on a channels-last tensor ``x[..., C]`` with conv weight ``w[O, C, 1, 1]``."""
    if w.ndim != 4 or w.shape[2:] != (1, 1) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"pointwise_conv: weight {w.shape} does not fit input {x.shape}")
    return _affine(x, w.data.reshape(w.shape[:2]).T, w, b, transposed=True)


def _affine(x, wmat, w, b, transposed):
    xd = x.data
    c, o = wmat.shape
    x2 = xd.reshape(-1, c)
    out = x2 @ wmat
    if b is not None:
        out = out + b.data
    if counter.active():
        counter.record("matmul", 2 * x2.shape[0] * c * o, out.size)

    def bw(g):
        g2 = g.reshape(-1, o)
        gw = x2.T @ g2
        gw = gw.T.reshape(w.shape) if transposed else gw
        gx = (g2 @ wmat.T).reshape(xd.shape)
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out.reshape(xd.shape[:-1] + (o,)), parents, bw, "linear")


_EXP_SAFE = 700.0  # exp(+-700) stays inside float64 normal range


def softmax_rows(s: np.ndarray, inplace: bool = False) -> np.ndarray:
    """Array-level softmax over the last axis; ``inplace`` reuses ``s`` as the output buffer."""
    e = s if inplace else np.empty_like(s)
    if s.max() < _EXP_SAFE and s.min() > -_EXP_SAFE:
        # no overflow and no all-zero row possible, so the max shift can be skipped
        np.exp(s, out=e)
    else:
        np.subtract(s, s.max(axis=-1, keepdims=True), out=e)
        np.exp(e, out=e)
    e /= (e @ np.ones(s.shape[-1]))[..., None]
    return e


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    y = np.moveaxis(softmax_rows(np.moveaxis(x.data, axis, -1)), -1, axis)
    counter.record("softmax", counter.SOFTMAX_FLOPS_PER_ELEM * y.size, y.size)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), bw, "softmax")


@functools.lru_cache(maxsize=None)
def _centering(d: int) -> np.ndarray:
    m = np.eye(d) - 1.0 / d
    m.flags.writeable = False
    return m


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs last dim {d}")
    xd = x.data.reshape(-1, d)
    center = _centering(d)  # x @ center subtracts the row mean; cheaper than a broadcast
    avg = np.full(d, 1.0 / d)
    xc = xd @ center
    inv = (1.0 / np.sqrt((xc * xc) @ avg + eps))[:, None]
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    counter.record("layer_norm", counter.LAYER_NORM_FLOPS_PER_ELEM * out.size, out.size)

    def bw(g):
        g = g.reshape(-1, d)
        dxhat = g * gd
        dx = inv * (dxhat @ center - xhat * ((dxhat * xhat) @ avg)[:, None])
        return dx.reshape(x.shape), (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_node(out.reshape(x.shape), (x, gamma, beta), bw, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    u = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)
    counter.record("gelu", counter.GELU_FLOPS_PER_ELEM * out.size, out.size)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return make_node(out, (x,), bw, "gelu")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, H, W) -> (C*kh*kw, B*Ho*Wo) patch columns.

    This orientation keeps the output spatial axis innermost, so the gather
    copy reads contiguous runs; the row-per-patch layout is ~2.5x slower at
    small channel counts.
    """
    C = xp.shape[1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, -1)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) over NCHW input with zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if (H + 2 * pad - kh) % stride or (W + 2 * pad - kw) % stride:
        raise ShapeError(f"conv2d: non-integral output size for {H}x{W}, k={kh}, pad={pad}, stride={stride}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: empty output for input {H}x{W}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(O, C * kh * kw)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    counter.record("conv2d", 2 * B * O * Ho * Wo * C * kh * kw, out.size)
    xshape, padded_shape = x.shape, xp.shape
    need_x, need_w = x.requires_grad, w.requires_grad

    def bw(g):
        gf = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gw = (gf @ cols.T).reshape(w.shape) if need_w else None
        gb = gf.sum(axis=1) if b is not None else None
        gx = None
        if need_x and stride == 1 and pad <= kh - 1 and pad <= kw - 1:
            # stride 1: the input gradient is a correlation of g with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - pad,) * 2, (kw - 1 - pad,) * 2))
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, O * kh * kw)
            gx = (wflip @ _im2col(gp, kh, kw, 1)).reshape(C, B, H, W).transpose(1, 0, 2, 3)
        elif need_x:
            gcols = (wmat.T @ gf).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros(padded_shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = (gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp).reshape(xshape)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(np.ascontiguousarray(out), parents, bw, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2, over NCHW."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return make_node(out, (x,), bw, "avg_pool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    """x2 nearest-neighbour upsampling over NCHW."""
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), bw, "upsample_nearest2")


def l2_norm(x: Tensor, axis=None) -> Tensor:
    """Euclidean norm over ``axis`` (all elements by default).

    The gradient at an all-zero slice is taken as zero.
    """
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    out = n.reshape(()) if axis is None else np.squeeze(n, axis=axis)

    def bw(g):
        gk = g.reshape(n.shape) if axis is None else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gk * xd / safe, 0.0),)

    return make_node(np.asarray(out), (x,), bw, "l2_norm")


def instance_stats(x: Tensor, eps: float = INSTANCE_NORM_EPS) -> tuple[Tensor, Tensor]:
    """Per-(batch, channel) spatial mean and sqrt(population variance + eps)."""
    if x.ndim != 4:
        raise ShapeError(f"instance_stats: expected (B, C, H, W), got {x.shape}")
    mu = x.mean(axis=(2, 3))
    centered = x - mu.reshape(mu.shape + (1, 1))
    var = (centered * centered).mean(axis=(2, 3))
    return mu, sqrt(var + eps)
