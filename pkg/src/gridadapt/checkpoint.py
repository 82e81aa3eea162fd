"""Checkpoint directories: one TNSR file per named parameter plus a manifest.

``params.txt`` lists ``<name> <file> <dim0>x<dim1>x...`` per line, UTF-8;
manifest order is canonical and preserved on load.
"""

from __future__ import annotations

import os
from collections import OrderedDict

from .numkit import read_tensor, write_tensor

MANIFEST = "params.txt"


def _shape_str(shape):
    return "x".join(str(d) for d in shape) if shape else "scalar"


def save_params(named_params, out_dir):
    """Write (name, Tensor-or-array) pairs as a checkpoint directory."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for name, param in named_params:
        arr = getattr(param, "data", param)
        fname = f"{name}.tnsr"
        write_tensor(os.path.join(out_dir, fname), arr)
        lines.append(f"{name} {fname} {_shape_str(arr.shape)}\n")
    with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def load_params(ckpt_dir):
    """Read a checkpoint directory back into an ordered name -> array map."""
    manifest = os.path.join(ckpt_dir, MANIFEST)
    if not os.path.isfile(manifest):
        raise ValueError(f"{ckpt_dir}: missing {MANIFEST}, not a checkpoint directory")
    out = OrderedDict()
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name, fname, shape_s = line.split()
            arr = read_tensor(os.path.join(ckpt_dir, fname))
            if _shape_str(arr.shape) != shape_s:
                raise ValueError(f"{fname}: shape {arr.shape} does not match manifest {shape_s}")
            out[name] = arr
    return out
