"""Dense matching between time-shifted image pairs.

Keypoints on a regular lattice are matched by normalized cross-correlation
of small patches, coarse-to-fine over a two-level pyramid, and kept only
when the score clears a threshold and the reciprocal match lands back on
the starting point. NCC is invariant to the global brightness changes such
pairs carry; textureless patches score ~0 and drop out as unreliable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class MatchConfig:
    patch: int = 9          # odd patch side
    stride: int = 4         # keypoint lattice stride
    search: int = 16        # search radius at the coarsest level
    refine: int = 2         # search radius when refining at full resolution
    levels: int = 2
    tau: float = 0.8
    fb_tol: float = 1.0     # max forward-backward round-trip error, pixels

    def __post_init__(self):
        if self.patch % 2 == 0 or self.patch < 3:
            raise ValueError("patch side must be odd and >= 3")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


@dataclass(frozen=True)
class Match:
    xa: int
    ya: int
    xb: int
    yb: int
    score: float


def to_gray(image):
    img = np.asarray(image)
    if img.ndim == 3:
        return img.astype(np.float64).mean(axis=2)
    return img.astype(np.float64)


def _pyramid(gray, levels):
    pyr = [gray]
    for _ in range(levels - 1):
        g = pyr[-1]
        h, w = g.shape[0] & ~1, g.shape[1] & ~1
        pyr.append(g[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3)))
    return pyr


def _ncc_scores(img, template, cy, cx, radius):
    """NCC of the template against every center within radius of (cy, cx).

    Returns (scores, y0, x0) where scores[i, j] is the score at center
    (y0 + i, x0 + j), or None when no candidate center fits the image.
    """
    r = template.shape[0] // 2
    h, w = img.shape
    y0, y1 = max(cy - radius, r), min(cy + radius, h - 1 - r)
    x0, x1 = max(cx - radius, r), min(cx + radius, w - 1 - r)
    if y0 > y1 or x0 > x1:
        return None
    region = img[y0 - r : y1 + r + 1, x0 - r : x1 + r + 1]
    win = sliding_window_view(region, template.shape)
    wz = win - win.mean(axis=(2, 3), keepdims=True)
    tz = template - template.mean()
    num = np.einsum("yxij,ij->yx", wz, tz)
    den = np.sqrt(np.einsum("yxij,yxij->yx", wz, wz) * (tz * tz).sum())
    scores = num / (den + 1e-12)
    return scores, y0, x0


def _patch_at(img, y, x, patch):
    r = patch // 2
    h, w = img.shape
    if y < r or x < r or y > h - 1 - r or x > w - 1 - r:
        return None
    return img[y - r : y + r + 1, x - r : x + r + 1]


def _match_point(pyr_a, pyr_b, x, y, cfg):
    """Best (xb, yb, score) in image b for point (x, y) of image a, or None."""
    scale = 2 ** (len(pyr_a) - 1)
    cy, cx = y, x
    if scale > 1:
        tpl = _patch_at(pyr_a[-1], y // scale, x // scale, cfg.patch)
        if tpl is None:
            return None
        res = _ncc_scores(pyr_b[-1], tpl, y // scale, x // scale, cfg.search)
        if res is None:
            return None
        scores, sy, sx = res
        by, bx = np.unravel_index(int(np.argmax(scores)), scores.shape)
        cy = y + (sy + int(by) - y // scale) * scale
        cx = x + (sx + int(bx) - x // scale) * scale
    radius = cfg.refine if scale > 1 else cfg.search
    tpl = _patch_at(pyr_a[0], y, x, cfg.patch)
    if tpl is None:
        return None
    res = _ncc_scores(pyr_b[0], tpl, cy, cx, radius)
    if res is None:
        return None
    scores, sy, sx = res
    by, bx = np.unravel_index(int(np.argmax(scores)), scores.shape)
    return sx + int(bx), sy + int(by), float(scores[by, bx])


def dense_match(image_a, image_b, config=None):
    """Forward-backward-consistent lattice matches from image_a to image_b."""
    cfg = config or MatchConfig()
    a = to_gray(image_a)
    b = to_gray(image_b)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    pyr_a = _pyramid(a, cfg.levels)
    pyr_b = _pyramid(b, cfg.levels)
    margin = (cfg.patch // 2) * 2 ** (cfg.levels - 1)
    h, w = a.shape
    matches = []
    for y in range(margin, h - margin, cfg.stride):
        for x in range(margin, w - margin, cfg.stride):
            fwd = _match_point(pyr_a, pyr_b, x, y, cfg)
            if fwd is None or fwd[2] < cfg.tau:
                continue
            xb, yb, score = fwd
            back = _match_point(pyr_b, pyr_a, xb, yb, cfg)
            if back is None:
                continue
            if math.hypot(back[0] - x, back[1] - y) > cfg.fb_tol:
                continue
            matches.append(Match(xa=x, ya=y, xb=xb, yb=yb, score=score))
    return matches


def write_matches(path, matches):
    """Debug dump, one `xa ya xb yb score` line per match."""
    with open(path, "w", encoding="utf-8") as fh:
        for m in matches:
            fh.write(f"{m.xa} {m.ya} {m.xb} {m.yb} {m.score:.6f}\n")


def read_matches(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            xa, ya, xb, yb, score = line.split()
            out.append(Match(int(xa), int(ya), int(xb), int(yb), float(score)))
    return out
