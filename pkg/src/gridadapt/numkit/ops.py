"""Differentiable operations over Tensors.

Every op computes its forward value eagerly with numpy and registers a
closure that maps the output gradient to input gradients. Reductions use
numpy's sequential routines, so results are reproducible bit for bit.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, record


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a):
    return record(-a.data, (a,), lambda g: (-g,))


def relu(a):
    mask = a.data > 0
    return record(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    xd = a.data
    factor = np.where(xd > 0, xd.dtype.type(1), xd.dtype.type(slope))
    return record(xd * factor, (a,), lambda g: (g * factor,))


def sigmoid(a):
    """Elementwise 1/(1+exp(-x)), stable across the whole float64 range."""
    xd = a.data
    t = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + t), t / (1.0 + t)).astype(xd.dtype)
    return record(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    y = np.exp(a.data)
    return record(y, (a,), lambda g: (g * y,))


def log(a):
    xd = a.data
    return record(np.log(xd), (a,), lambda g: (g / xd,))


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient passes through the interior only."""
    xd = a.data
    inside = (xd >= lo) & (xd <= hi)
    return record(np.clip(xd, lo, hi), (a,), lambda g: (g * inside,))


def softmax_channels(a):
    """Softmax over axis 1 of a [B,C,H,W] tensor; rejects non-finite logits."""
    xd = a.data
    if not np.isfinite(xd).all():
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(xd))[0])
        raise ValueError(f"softmax_channels: non-finite logit at index {idx}")
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return record(y, (a,), bw)


def log_softmax_channels(a):
    """log(softmax) over axis 1, computed without forming the softmax first."""
    xd = a.data
    if not np.isfinite(xd).all():
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(xd))[0])
        raise ValueError(f"log_softmax_channels: non-finite logit at index {idx}")
    shifted = xd - xd.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - logz
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return record(out, (a,), bw)


def sum_all(a):
    """Sum of all elements, as a 0-d tensor."""
    return record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.data.shape),))


def mean_all(a):
    n = a.data.size
    return record(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.data.shape),))


def upsample_nearest(a, factor):
    """Replicate each spatial cell of a [B,C,H,W] tensor into a factor x factor block."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    xd = a.data
    B, C, H, W = xd.shape
    y = xd.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return record(y, (a,), bw)


def upsample_bilinear(a, factor):
    """Bilinear upsample of a [B,C,H,W] tensor by an integer factor.

    Output sample centers follow the half-pixel convention, edges clamped.
    """
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    xd = a.data
    B, C, H, W = xd.shape

    def axis_weights(n):
        src = (np.arange(n * factor, dtype=xd.dtype) + 0.5) / factor - 0.5
        lo = np.clip(np.floor(src).astype(np.int64), 0, n - 1)
        hi = np.minimum(lo + 1, n - 1)
        frac = np.clip(src - lo, 0.0, 1.0).astype(xd.dtype)
        return lo, hi, frac

    y0, y1, fy = axis_weights(H)
    x0, x1, fx = axis_weights(W)
    fy = fy[:, None]
    y = (
        xd[:, :, y0][:, :, :, x0] * (1 - fy) * (1 - fx)
        + xd[:, :, y0][:, :, :, x1] * (1 - fy) * fx
        + xd[:, :, y1][:, :, :, x0] * fy * (1 - fx)
        + xd[:, :, y1][:, :, :, x1] * fy * fx
    )

    def bw(g):
        gx = np.zeros_like(xd)
        yy0 = np.broadcast_to(y0[:, None], g.shape[2:])
        yy1 = np.broadcast_to(y1[:, None], g.shape[2:])
        xx0 = np.broadcast_to(x0[None, :], g.shape[2:])
        xx1 = np.broadcast_to(x1[None, :], g.shape[2:])
        for (yy, xx, w) in (
            (yy0, xx0, (1 - fy) * (1 - fx)),
            (yy0, xx1, (1 - fy) * fx),
            (yy1, xx0, fy * (1 - fx)),
            (yy1, xx1, fy * fx),
        ):
            np.add.at(gx, (slice(None), slice(None), yy, xx), g * w)
        return (gx,)

    return record(np.ascontiguousarray(y), (a,), bw)


def conv_out_size(n, k, stride, dilation, padding):
    eff = dilation * (k - 1) + 1
    return (n + 2 * padding - eff) // stride + 1


def conv2d(x, kernel, stride=1, dilation=1, padding=0):
    """2-d cross-correlation of [B,C,H,W] with [O,C,kh,kw], zero padding.

    Output spatial size follows the standard arithmetic
    floor((H + 2p - dilation*(kh-1) - 1)/stride) + 1. Gradients flow to both
    the input and the kernel. The computation gathers one input slice per
    kernel tap, which keeps the backward pass an exact mirror of the forward.
    """
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} dilation={dilation} padding={padding}")
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input and kernel, got {xd.shape} and {kd.shape}")
    B, C, H, W = xd.shape
    O, Ck, kh, kw = kd.shape
    if C != Ck:
        raise ValueError(
            f"conv2d: input has {C} channels but kernel expects {Ck} "
            f"(input {xd.shape}, kernel {kd.shape})"
        )
    Hout = conv_out_size(H, kh, stride, dilation, padding)
    Wout = conv_out_size(W, kw, stride, dilation, padding)
    if Hout < 1 or Wout < 1:
        raise ValueError(f"conv2d: empty output {Hout}x{Wout} for input {H}x{W}")

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd

    def tap(i, j):
        h0, w0 = i * dilation, j * dilation
        return xp[:, :, h0 : h0 + (Hout - 1) * stride + 1 : stride,
                  w0 : w0 + (Wout - 1) * stride + 1 : stride]

    acc = np.zeros((B, Hout, Wout, O), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(tap(i, j), kd[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(acc, 3, 1))

    def bw(g):
        gm = np.moveaxis(g, 1, 3)  # [B,Hout,Wout,O]
        gk = np.zeros_like(kd)
        gxp = np.zeros((B,) + xp.shape[2:] + (C,), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gk[:, :, i, j] = np.tensordot(gm, tap(i, j), axes=([0, 1, 2], [0, 2, 3]))
                h0, w0 = i * dilation, j * dilation
                gxp[:, h0 : h0 + (Hout - 1) * stride + 1 : stride,
                    w0 : w0 + (Wout - 1) * stride + 1 : stride, :] += np.tensordot(
                        gm, kd[:, :, i, j], axes=([3], [0]))
        gx = np.moveaxis(gxp, 3, 1)
        if padding:
            gx = gx[:, :, padding : padding + H, padding : padding + W]
        return (np.ascontiguousarray(gx), gk)

    return record(out, (x, kernel), bw)


# Operator sugar on Tensor. Scalars are lifted to constants of matching dtype.
Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = neg
