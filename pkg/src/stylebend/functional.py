"""Convolution, pooling, resampling and loss ops on :class:`Tensor`."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, matmul


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of a [B,Cin,H,W] input with [Cout,Cin,k,k] filters."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = weight.shape
    if Cin_w != Cin:
        raise ShapeError(f"input has {Cin} channels, weight expects {Cin_w}")
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"kernel {kh} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({Cout},)")
    if stride == 1:
        out, backward = _conv_shifted(x, weight, pad)
    else:
        out, backward = _conv_im2col(x, weight, stride, pad)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_all(g):
        gx, gw = backward(g)
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    return Tensor._from_op(out, parents, backward_all, "conv2d")


def _conv_shifted(x: Tensor, weight: Tensor, pad: int):
    # Stride-1 convolution on the flattened padded grid: tap (i, j) of the
    # kernel reads the same buffer shifted by i*Wp + j, so every tap is one
    # GEMM on a view and no patch matrix is materialised.
    B, Cin, H, W = x.shape
    Cout, _, k, _ = weight.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = Hp - k + 1, Wp - k + 1
    n = B * Hp * Wp
    tail = (k - 1) * Wp + (k - 1)
    flat = np.zeros((Cin, n + tail), dtype=x.dtype)
    flat[:, :n].reshape(Cin, B, Hp, Wp)[:, :, pad:pad + H, pad:pad + W] = x.data.transpose(1, 0, 2, 3)
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
    offsets = [(i, j, i * Wp + j) for i in range(k) for j in range(k)]

    acc = None
    for i, j, o in offsets:
        term = taps[i, j] @ flat[:, o:o + n]
        if acc is None:
            acc = term
        else:
            acc += term
    out = np.ascontiguousarray(acc.reshape(Cout, B, Hp, Wp)[:, :, :Ho, :Wo].transpose(1, 0, 2, 3))

    def backward(g):
        gfull = np.zeros((Cout, B, Hp, Wp), dtype=g.dtype)
        gfull[:, :, :Ho, :Wo] = g.transpose(1, 0, 2, 3)
        gfull = gfull.reshape(Cout, n)
        gw = gx = None
        if weight.requires_grad:
            gw = np.empty((k, k, Cout, Cin), dtype=g.dtype)
            for i, j, o in offsets:
                gw[i, j] = gfull @ flat[:, o:o + n].T
            gw = np.ascontiguousarray(gw.transpose(2, 3, 0, 1))
        if x.requires_grad:
            gflat = np.zeros_like(flat)
            for i, j, o in offsets:
                gflat[:, o:o + n] += taps[i, j].T @ gfull
            gx = np.ascontiguousarray(
                gflat[:, :n].reshape(Cin, B, Hp, Wp)[:, :, pad:pad + H, pad:pad + W].transpose(1, 0, 2, 3))
        return gx, gw

    return out, backward


def _conv_im2col(x: Tensor, weight: Tensor, stride: int, pad: int):
    B, Cin, H, W = x.shape
    Cout, _, k, _ = weight.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, Cin * k * k)
    wmat = weight.data.reshape(Cout, -1)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, Cin, k, k)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            gx = np.ascontiguousarray(gxp[:, :, pad:pad + H, pad:pad + W]) if pad else gxp
        return gx, gw

    return out, backward


def reduce_mean_hw(x: Tensor) -> Tensor:
    """Spatial mean of a [B,C,H,W] map -> [B,C]."""
    if x.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got {x.shape}")
    if x.shape[2] * x.shape[3] == 0:
        raise ShapeError("empty spatial extent")
    return x.mean(axis=(2, 3))


def reduce_mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    return x.mean()


def _pool_view(x: Tensor, size: int) -> np.ndarray:
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"spatial size {H}x{W} not divisible by pool size {size}")
    return x.data.reshape(B, C, H // size, size, W // size, size)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    v = _pool_view(x, size)
    out = v.mean(axis=(3, 5))
    scale = x.dtype.type(1.0 / (size * size))

    def backward(g):
        up = np.broadcast_to(g[:, :, :, None, :, None] * scale, v.shape)
        return (up.reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward, "avg_pool2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    v = _pool_view(x, size)
    out = v.max(axis=(3, 5))
    hit = v == out[:, :, :, None, :, None]
    # ties split the gradient evenly
    share = hit / hit.sum(axis=(3, 5), keepdims=True)

    def backward(g):
        return ((share * g[:, :, :, None, :, None]).reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward, "max_pool2d")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias with weight stored as [out, in]."""
    out = matmul(x, weight.transpose())
    return out if bias is None else out + bias


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0
        m[o, i0] += 1.0 - w1
        m[o, i1] += w1
    return m


def upsample_bilinear(x: Tensor, size: tuple) -> Tensor:
    """Bilinear resize of the last two axes of a [..., H, W] tensor."""
    H, W = x.shape[-2:]
    Ho, Wo = size
    ah = _interp_matrix(Ho, H, x.dtype)
    aw = _interp_matrix(Wo, W, x.dtype)
    out = np.einsum("oh,...hw,pw->...op", ah, x.data, aw, optimize=True)

    def backward(g):
        return (np.einsum("oh,...op,pw->...hw", ah, g, aw, optimize=True),)

    return Tensor._from_op(out, (x,), backward, "upsample_bilinear")


def resize_nearest(mask: np.ndarray, size: tuple) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes (no gradient)."""
    H, W = mask.shape[-2:]
    Ho, Wo = size
    rows = np.minimum(((np.arange(Ho) + 0.5) * H / Ho).astype(int), H - 1)
    cols = np.minimum(((np.arange(Wo) + 0.5) * W / Wo).astype(int), W - 1)
    return mask[..., rows[:, None], cols[None, :]]


PROB_FLOOR = 1e-7


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Pixel-mean binary cross-entropy from logits.

    Probabilities are clamped to [1e-7, 1 - 1e-7] by clamping the logits, so
    the loss never exceeds -log(1e-7) per pixel and saturated pixels pass no
    gradient.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"target shape {t.shape} != logits shape {logits.shape}")
    bound = np.log((1 - PROB_FLOOR) / PROB_FLOOR)
    z = np.clip(logits.data, -bound, bound)
    # log(1 + e^z) - t*z, computed stably
    per_pixel = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = np.asarray(per_pixel.mean(), dtype=logits.dtype)
    inside = (logits.data > -bound) & (logits.data < bound)

    def backward(g):
        p = 1.0 / (1.0 + np.exp(-z))
        return ((g * (p - t) * inside / n).astype(logits.dtype),)

    return Tensor._from_op(out, (logits,), backward, "bce_with_logits")
