"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (nested loops, scalar
recurrences, central differences) and must stay decoupled from the library
code it checks.
"""

import numpy as np


def conv2d_reference(x, kernel, stride=1, dilation=1, padding=0):
    """Direct nested-loop 2-d cross-correlation with zero padding."""
    B, C, H, W = x.shape
    O, _, kh, kw = kernel.shape
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    Hout = (H + 2 * padding - eff_h) // stride + 1
    Wout = (W + 2 * padding - eff_w) // stride + 1
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + H, padding : padding + W] = x
    out = np.zeros((B, O, Hout, Wout), dtype=x.dtype)
    for b in range(B):
        for o in range(O):
            for hh in range(Hout):
                for ww in range(Wout):
                    acc = 0.0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (
                                    xp[b, c, hh * stride + i * dilation, ww * stride + j * dilation]
                                    * kernel[o, c, i, j]
                                )
                    out[b, o, hh, ww] = acc
    return out


def numeric_grad(fn, arr, h=1e-5):
    """Central-difference gradient of scalar fn() w.r.t. arr (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = fn()
        flat[i] = keep - h
        fm = fn()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric):
    """Elementwise |a-n| scaled by max(1, |a|, |n|), reduced with max."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def adam_scalar_reference(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook Adam recurrence on one scalar; returns theta after each step."""
    m = 0.0
    v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mh = m / (1.0 - beta1 ** t)
        vh = v / (1.0 - beta2 ** t)
        theta = theta - lr * mh / (np.sqrt(vh) + eps)
        out.append(theta)
    return out


def miou_from_sets(pred, gt, num_classes, ignore=255):
    """Set-based IoU: per class, |pred ∩ gt| / |pred ∪ gt| over scored pixels."""
    pred = pred.reshape(-1)
    gt = gt.reshape(-1)
    keep = gt != ignore
    pred, gt = pred[keep], gt[keep]
    ious = {}
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        if not g.any():
            continue
        union = np.logical_or(p, g).sum()
        inter = np.logical_and(p, g).sum()
        ious[c] = inter / union
    mean = float(np.mean(list(ious.values()))) if ious else 0.0
    return ious, mean
