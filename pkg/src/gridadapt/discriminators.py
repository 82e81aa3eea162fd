"""Per-grid domain discriminators.

Each head is a two-layer 1x1 convolution stack (D -> D/2 -> 1, leaky ReLU
0.2 between) applied independently at every grid of a feature map, ending
in a sigmoid: the probability that the grid came from the source domain.
The final layer starts at zero so an untrained head outputs exactly 0.5.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import numkit as nk
from .checkpoint import load_params, save_params


def _xavier(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    fan_out = shape[0] * int(np.prod(shape[2:]))
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _head_params(prefix, feature_dim, rng, dtype):
    hidden = max(1, feature_dim // 2)
    p = OrderedDict()
    p[f"{prefix}.conv1.weight"] = nk.Tensor(
        _xavier(rng, (hidden, feature_dim, 1, 1), dtype), requires_grad=True,
        name=f"{prefix}.conv1.weight")
    p[f"{prefix}.conv1.bias"] = nk.Tensor(
        np.zeros((1, hidden, 1, 1), dtype=dtype), requires_grad=True,
        name=f"{prefix}.conv1.bias")
    # zero final layer: p = sigmoid(0) = 0.5 until trained
    p[f"{prefix}.conv2.weight"] = nk.Tensor(
        np.zeros((1, hidden, 1, 1), dtype=dtype), requires_grad=True,
        name=f"{prefix}.conv2.weight")
    p[f"{prefix}.conv2.bias"] = nk.Tensor(
        np.zeros((1, 1, 1, 1), dtype=dtype), requires_grad=True,
        name=f"{prefix}.conv2.bias")
    return p


def _head_forward(params, prefix, features):
    x = nk.conv2d(features, params[f"{prefix}.conv1.weight"])
    x = nk.leaky_relu(nk.add(x, params[f"{prefix}.conv1.bias"]), slope=0.2)
    x = nk.conv2d(x, params[f"{prefix}.conv2.weight"])
    return nk.add(x, params[f"{prefix}.conv2.bias"])


class GlobalDiscriminator:
    def __init__(self, feature_dim, rng=None, dtype=np.float64):
        self.feature_dim = feature_dim
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = _head_params("disc_global", feature_dim, rng, self.dtype)

    def logits(self, features):
        if features.shape[1] != self.feature_dim:
            raise ValueError(
                f"feature dim {features.shape[1]} does not match discriminator "
                f"(expects {self.feature_dim})")
        return _head_forward(self.params, "disc_global", features)

    def prob(self, features):
        """p_n = sigmoid(logit) per grid, shape [B,1,H_f,W_f], values in (0,1)."""
        return nk.sigmoid(self.logits(features))

    def all_params(self):
        return list(self.params.values())

    def save(self, out_dir):
        save_params(self.params.items(), out_dir)


class ClasswiseDiscriminatorBank:
    """One independent per-grid head per class; heads share no parameters."""

    def __init__(self, classes, feature_dim, rng=None, dtype=np.float64):
        self.classes = tuple(classes)
        self.feature_dim = feature_dim
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = OrderedDict()
        for cls in self.classes:
            self.params.update(_head_params(f"disc_class.{cls}", feature_dim, rng, self.dtype))

    def prob(self, features, cls):
        """Per-grid source probability under the head for class ``cls``."""
        if cls not in self.classes:
            raise ValueError(f"unknown class {cls!r}; bank covers {list(self.classes)}")
        if features.shape[1] != self.feature_dim:
            raise ValueError(
                f"feature dim {features.shape[1]} does not match discriminator "
                f"(expects {self.feature_dim})")
        return nk.sigmoid(_head_forward(self.params, f"disc_class.{cls}", features))

    def class_params(self, cls):
        prefix = f"disc_class.{cls}."
        return [t for n, t in self.params.items() if n.startswith(prefix)]

    def all_params(self):
        return list(self.params.values())

    def save(self, out_dir):
        save_params(self.params.items(), out_dir)


def load_discriminators(ckpt_dir, gdisc, bank):
    """Restore both discriminators, in place, from one checkpoint directory."""
    loaded = load_params(ckpt_dir)
    for target in (gdisc, bank):
        for name, tensor in target.params.items():
            if name not in loaded:
                raise ValueError(f"checkpoint {ckpt_dir} is missing parameter {name}")
            arr = loaded[name].astype(target.dtype)
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {tensor.data.shape}")
            tensor.data[...] = arr
