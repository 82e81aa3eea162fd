"""Procedural two-city benchmark with controllable domain shift.

Scenes are layered integer compositions: sky gradient, building skyline
with windows, road band with lane marks, vegetation blobs, then dynamic
objects (cars, persons). The two styles differ in palette, texture-noise
level and object-frequency priors, giving both a global appearance shift
and a composition shift between "cities".

A time-shifted partner shares the full static layout (including its
texture noise), re-samples the dynamic objects independently, and gets a
global brightness jitter. Geometry and color math are integer-only, so a
spec reproduces its scene bit for bit on any platform.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .netpbm import write_pgm, write_ppm

CLASSES = ("road", "building", "sky", "vegetation", "car", "person")
STATIC_CLASSES = ("road", "building", "sky", "vegetation")

# 13-class naming preset compatible with common road-scene label sets, plus
# the matching static-object list (full list kept verbatim for richer sets).
CLASSES_13 = ("road", "sidewalk", "building", "traffic_light", "traffic_sign",
              "vegetation", "sky", "person", "rider", "car", "bus",
              "motorcycle", "bicycle")
STATIC_CLASSES_FULL = ("road", "sidewalk", "building", "wall", "fence", "pole",
                       "traffic_light", "traffic_sign", "vegetation", "terrain",
                       "sky")
STATIC_CLASSES_13 = tuple(c for c in STATIC_CLASSES_FULL if c in CLASSES_13)

_STYLE_CODES = {"source": 0, "target": 1}

_STYLES = {
    "source": dict(
        sky_top=(148, 184, 224), sky_bottom=(196, 214, 238),
        building=(152, 140, 126), building_var=20, window=(72, 66, 60),
        road=(86, 86, 92), lane=(212, 206, 188),
        veg=(56, 118, 62), veg_var=16,
        cars=[(172, 44, 40), (44, 62, 158), (206, 182, 64), (228, 228, 232)],
        person=(206, 122, 96),
        noise=5,
        horizon_pct=(32, 42), road_pct=(30, 36),
        n_cars=(1, 3), n_persons=(0, 2), n_veg=(3, 6),
    ),
    "target": dict(
        sky_top=(208, 176, 148), sky_bottom=(228, 202, 172),
        building=(102, 112, 134), building_var=14, window=(52, 58, 76),
        road=(128, 124, 118), lane=(238, 232, 212),
        veg=(40, 92, 46), veg_var=12,
        cars=[(28, 28, 34), (88, 140, 172), (192, 82, 30), (118, 118, 124)],
        person=(182, 142, 120),
        noise=10,
        horizon_pct=(24, 34), road_pct=(22, 28),
        n_cars=(2, 6), n_persons=(1, 4), n_veg=(0, 3),
    ),
}


@dataclass(frozen=True)
class SceneSpec:
    seed: object  # int or tuple of ints
    style: str
    height: int = 128
    width: int = 128
    jitter: int = 10  # partner brightness jitter amplitude, percent
    n_cars: int | None = None
    n_persons: int | None = None
    n_veg: int | None = None

    def __post_init__(self):
        if self.style not in _STYLE_CODES:
            raise ValueError(f"style must be source or target, got {self.style!r}")
        if self.height < 16 or self.width < 16:
            raise ValueError("scene must be at least 16x16")


@dataclass
class SceneSample:
    image: np.ndarray                 # uint8 [H,W,3]
    label: np.ndarray | None          # uint8 [H,W] class indices
    partner: np.ndarray | None = None
    static_mask: np.ndarray | None = None  # bool [H,W], class in STATIC_CLASSES
    partner_static_mask: np.ndarray | None = None


def _rng(spec, stream):
    parts = spec.seed if isinstance(spec.seed, tuple) else (spec.seed,)
    return np.random.default_rng(list(int(p) for p in parts) + [_STYLE_CODES[spec.style], stream])


def _cls(name):
    return CLASSES.index(name)


def _tinted(rng, base, var):
    t = rng.integers(-var, var + 1)
    return tuple(int(np.clip(c + t, 0, 255)) for c in base)


def _fill_rect(img, label, y0, y1, x0, x1, color, cls):
    y0, x0 = max(y0, 0), max(x0, 0)
    y1, x1 = min(y1, img.shape[0]), min(x1, img.shape[1])
    if y0 >= y1 or x0 >= x1:
        return
    img[y0:y1, x0:x1] = color
    label[y0:y1, x0:x1] = cls


def _fill_ellipse(img, label, cy, cx, ry, rx, color, cls):
    h, w = label.shape
    y0, y1 = max(cy - ry, 0), min(cy + ry + 1, h)
    x0, x1 = max(cx - rx, 0), min(cx + rx + 1, w)
    if y0 >= y1 or x0 >= x1 or ry < 1 or rx < 1:
        return
    yy = np.arange(y0, y1)[:, None] - cy
    xx = np.arange(x0, x1)[None, :] - cx
    inside = (yy * rx) ** 2 + (xx * ry) ** 2 <= (ry * rx) ** 2
    img[y0:y1, x0:x1][inside] = color
    label[y0:y1, x0:x1][inside] = cls


def _render_static(spec):
    """Static canvas: sky, skyline, road, vegetation, shared texture noise."""
    st = _STYLES[spec.style]
    rng = _rng(spec, 0)
    h, w = spec.height, spec.width
    img = np.zeros((h, w, 3), dtype=np.int32)
    label = np.zeros((h, w), dtype=np.uint8)

    horizon = h * int(rng.integers(*st["horizon_pct"], endpoint=True)) // 100
    road_h = h * int(rng.integers(*st["road_pct"], endpoint=True)) // 100
    road_top = h - road_h

    # sky gradient
    top = np.array(st["sky_top"], dtype=np.int32)
    bot = np.array(st["sky_bottom"], dtype=np.int32)
    rows = np.arange(road_top)
    grad = top + (bot - top) * rows[:, None] // max(road_top - 1, 1)
    img[:road_top] = grad[:, None, :]
    label[:road_top] = _cls("sky")

    # building skyline covering [horizon, road_top)
    x = 0
    while x < w:
        bw = int(rng.integers(w // 10, w // 4 + 1))
        extra = int(rng.integers(0, max(horizon // 2, 1) + 1))
        top_b = max(horizon - extra, 2)
        color = _tinted(rng, st["building"], st["building_var"])
        _fill_rect(img, label, top_b, road_top, x, x + bw, color, _cls("building"))
        # windows
        for wy in range(top_b + 3, road_top - 2, 6):
            for wx in range(x + 2, min(x + bw, w) - 2, 5):
                _fill_rect(img, label, wy, wy + 2, wx, wx + 2, st["window"], _cls("building"))
        x += bw

    # road band with dashed center line
    _fill_rect(img, label, road_top, h, 0, w, st["road"], _cls("road"))
    mid = road_top + road_h // 2
    for x0 in range(0, w, 14):
        _fill_rect(img, label, mid, mid + 2, x0, x0 + 7, st["lane"], _cls("road"))

    # vegetation blobs along the skyline base
    n_veg = spec.n_veg if spec.n_veg is not None else int(rng.integers(*st["n_veg"], endpoint=True))
    for _ in range(n_veg):
        cy = int(rng.integers(max(horizon - 4, 2), road_top))
        cx = int(rng.integers(0, w))
        r = int(rng.integers(max(h // 24, 2), max(h // 10, 3) + 1))
        color = _tinted(rng, st["veg"], st["veg_var"])
        _fill_ellipse(img, label, cy, cx, r, r + int(rng.integers(0, r + 1)), color,
                      _cls("vegetation"))

    # shared texture noise (luminance), part of the static layout
    amp = st["noise"]
    noise = rng.integers(-amp, amp + 1, size=(h, w, 1), dtype=np.int32)
    img = np.clip(img + noise, 0, 255)
    return img, label, road_top, road_h


def _draw_dynamic(img, label, road_top, road_h, spec, stream):
    st = _STYLES[spec.style]
    rng = _rng(spec, stream)
    h, w = label.shape

    n_cars = spec.n_cars if spec.n_cars is not None else int(rng.integers(*st["n_cars"], endpoint=True))
    for _ in range(n_cars):
        ch = int(np.clip(road_h // 3, 5, 14))
        cw = 2 * ch
        cy = int(rng.integers(road_top + 1, max(h - ch - 1, road_top + 2)))
        cx = int(rng.integers(0, max(w - cw, 1)))
        body = st["cars"][int(rng.integers(0, len(st["cars"])))]
        _fill_rect(img, label, cy, cy + ch, cx, cx + cw, body, _cls("car"))
        # rounded front/back via quarter-ellipse corners
        _fill_ellipse(img, label, cy + ch // 2, cx, ch // 2, ch // 3, body, _cls("car"))
        _fill_ellipse(img, label, cy + ch // 2, cx + cw - 1, ch // 2, ch // 3, body, _cls("car"))
        # cabin strip
        cabin = tuple(max(c - 35, 0) for c in body)
        _fill_rect(img, label, cy + 1, cy + 1 + max(ch // 3, 1), cx + cw // 4,
                   cx + cw - cw // 4, cabin, _cls("car"))

    n_persons = spec.n_persons if spec.n_persons is not None else int(
        rng.integers(*st["n_persons"], endpoint=True))
    for _ in range(n_persons):
        ph = max(h // 14, 6)
        pw = max(ph // 3, 2)
        py = int(rng.integers(max(road_top - ph // 3, 1), max(h - ph - 1, road_top)))
        px = int(rng.integers(1, max(w - pw - 1, 2)))
        _fill_rect(img, label, py + pw, py + ph, px, px + pw, st["person"], _cls("person"))
        _fill_ellipse(img, label, py + pw // 2, px + pw // 2, pw // 2 + 1, pw // 2 + 1,
                      st["person"], _cls("person"))


def _static_mask(label):
    mask = np.zeros(label.shape, dtype=bool)
    for name in STATIC_CLASSES:
        mask |= label == _cls(name)
    return mask


def generate_scene(spec):
    """One observation: image + pixel-perfect labels + static/dynamic mask."""
    img, label, road_top, road_h = _render_static(spec)
    _draw_dynamic(img, label, road_top, road_h, spec, stream=1)
    img = img.astype(np.uint8)
    return SceneSample(image=img, label=label, static_mask=_static_mask(label))


def generate_pair(spec):
    """Scene plus a time-shifted partner: same statics, fresh dynamics, jitter."""
    img, label, road_top, road_h = _render_static(spec)
    partner = img.copy()
    plabel = label.copy()
    _draw_dynamic(img, label, road_top, road_h, spec, stream=1)
    _draw_dynamic(partner, plabel, road_top, road_h, spec, stream=2)
    if spec.jitter:
        scale = 100 + int(_rng(spec, 3).integers(-spec.jitter, spec.jitter + 1))
        partner = np.clip(partner * scale // 100, 0, 255)
    return SceneSample(
        image=img.astype(np.uint8),
        label=label,
        partner=partner.astype(np.uint8),
        static_mask=_static_mask(label),
        partner_static_mask=_static_mask(plabel),
    )


def emit_dataset(count, style, out_root, with_pairs=False, eval_count=0, seed=0,
                 height=128, width=128, jitter=10):
    """Write a dataset tree; returns the number of samples written.

    Layout: <root>/<split>/<id>/image.ppm [label.pgm] [partner.ppm]
    [static.pgm] plus <root>/classes.txt. Source datasets carry labels in
    every split; target datasets carry labels only under eval/.
    """
    os.makedirs(out_root, exist_ok=True)
    with open(os.path.join(out_root, "classes.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(CLASSES) + "\n")
    written = 0
    for split, n, offset in (("train", count, 0), ("eval", eval_count, count)):
        if n <= 0:
            continue
        for i in range(n):
            spec = SceneSpec(seed=(int(seed), offset + i), style=style,
                             height=height, width=width, jitter=jitter)
            pair = with_pairs and split == "train"
            sample = generate_pair(spec) if pair else generate_scene(spec)
            sdir = os.path.join(out_root, split, f"{offset + i:05d}")
            os.makedirs(sdir, exist_ok=True)
            write_ppm(os.path.join(sdir, "image.ppm"), sample.image)
            if style == "source" or split == "eval":
                write_pgm(os.path.join(sdir, "label.pgm"), sample.label)
            if sample.partner is not None:
                write_ppm(os.path.join(sdir, "partner.ppm"), sample.partner)
                write_pgm(os.path.join(sdir, "static.pgm"),
                          sample.static_mask.astype(np.uint8) * 255)
            written += 1
    return written
