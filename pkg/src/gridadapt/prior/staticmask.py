"""Static-scene prior: matched superpixels and pseudo-label refinement.

A superpixel of the target image counts one vote per matched lattice
keypoint inside it; superpixels reaching ``k`` votes (inclusive, k=3 by
default) form the static prior mask. For masked pixels the pseudo-label
distribution is renormalized over the static classes and non-static mass
is zeroed exactly; unmasked pixels pass through bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PriorMask:
    """Boolean per-pixel mask plus the per-superpixel match counts behind it."""

    mask: np.ndarray    # [H,W] bool
    counts: np.ndarray  # [K] int64 matched-keypoint count per superpixel
    k: int


def extract_static_prior(matches, spx, k=3):
    """Union of superpixels holding at least ``k`` matched keypoints."""
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = np.zeros(spx.count, dtype=np.int64)
    h, w = spx.ids.shape
    for m in matches:
        if not (0 <= m.ya < h and 0 <= m.xa < w):
            raise ValueError(f"match ({m.xa},{m.ya}) outside the {w}x{h} superpixel map")
        counts[spx.ids[m.ya, m.xa]] += 1
    keep = counts >= k
    return PriorMask(mask=keep[spx.ids], counts=counts, k=k)


def static_class_ids(classes, static_names):
    """Indices of the static classes; must be a non-empty strict subset."""
    classes = list(classes)
    names = list(static_names)
    if not names:
        raise ValueError("static class set must be non-empty")
    missing = [n for n in names if n not in classes]
    if missing:
        raise ValueError(f"static classes {missing} not in class set {classes}")
    if len(set(names)) >= len(classes):
        raise ValueError("static class set must be a strict subset of the classes")
    return [classes.index(n) for n in names]


def refine_pseudo_labels(pseudo, mask, static_ids, diag=None):
    """Suppress non-static mass at masked pixels, renormalizing over statics.

    Masked pixels where the static mass is exactly zero are left unchanged
    and counted into ``diag["unrefinable"]``. Accepts [C,H,W] or [B,C,H,W].
    """
    arr = np.array(pseudo, copy=True)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 2:
        m = np.broadcast_to(m, (arr.shape[0],) + m.shape)
    sums = arr.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise ValueError("pseudo-label distributions must sum to 1 per pixel")

    ncls = arr.shape[1]
    static_ids = sorted(set(int(c) for c in static_ids))
    if any(c < 0 or c >= ncls for c in static_ids):
        raise ValueError(f"static class id outside [0,{ncls})")
    static_sel = np.zeros(ncls, dtype=bool)
    static_sel[static_ids] = True
    other_ids = np.nonzero(~static_sel)[0]

    denom = arr[:, static_sel].sum(axis=1)
    apply = m & (denom > 0)
    stuck = int((m & (denom == 0)).sum())
    if diag is not None and stuck:
        diag["unrefinable"] = diag.get("unrefinable", 0) + stuck

    b, y, x = np.nonzero(apply)
    if b.size:
        d = denom[b, y, x]
        for c in static_ids:
            arr[b, c, y, x] /= d
        for c in other_ids:
            arr[b, c, y, x] = 0.0
    return arr[0] if squeeze else arr
