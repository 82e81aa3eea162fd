"""TNSR binary tensor files.

Layout: magic "TNSR", one version byte (=1), one dtype byte
(1=float32, 2=float64, 3=uint8), one rank byte, then rank little-endian
uint64 dims, then the row-major payload, little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TNSR"
VERSION = 1

_WIRE_DTYPES = {1: "<f4", 2: "<f8", 3: "u1"}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}


def write_tensor(path, array):
    arr = np.asarray(array)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype for TNSR file: {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError(f"rank {arr.ndim} exceeds TNSR limit")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION, code, arr.ndim]))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype(_WIRE_DTYPES[code], copy=False).tobytes(order="C"))


def read_tensor(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a TNSR file")
    version, code, rank = blob[4], blob[5], blob[6]
    if version != VERSION:
        raise ValueError(f"{path}: unsupported TNSR version {version}")
    if code not in _WIRE_DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    off = 7
    dims = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    wire = np.dtype(_WIRE_DTYPES[code])
    expected = int(np.prod(dims, dtype=np.int64)) * wire.itemsize if rank else wire.itemsize
    payload = blob[off:]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=wire).reshape(dims)
    return arr.astype(wire.newbyteorder("="), copy=True)
