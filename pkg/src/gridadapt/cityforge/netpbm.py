"""Binary PPM (P6) and PGM (P5) reading and writing, maxval 255."""

from __future__ import annotations

import numpy as np


def write_ppm(path, image):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"PPM wants uint8 [H,W,3], got {img.dtype} {img.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def write_pgm(path, image):
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM wants uint8 [H,W], got {img.dtype} {img.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def _read_header(blob, magic, path):
    if blob[:2] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = tokens
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    return width, height, pos


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    width, height, pos = _read_header(blob, b"P6", path)
    expected = width * height * 3
    payload = blob[pos : pos + expected]
    if len(payload) != expected:
        raise ValueError(f"{path}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    width, height, pos = _read_header(blob, b"P5", path)
    expected = width * height
    payload = blob[pos : pos + expected]
    if len(payload) != expected:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()
