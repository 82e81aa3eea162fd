"""Feature extractor and label predictor.

A small dilated-convolution network: stride-2 layers downsample by a factor
``d`` (default 4), then dilated stride-1 layers widen the receptive field
without further downsampling. Each cell of the resulting feature map (a
"grid") covers one d x d pixel block; the label head is a 1x1 convolution
over grids, and pixel-level predictions replicate each grid over its block.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .checkpoint import load_params, save_params

IGNORE_LABEL = 255


@dataclass(frozen=True)
class SegmenterConfig:
    classes: tuple
    channels: tuple = (16, 32, 48, 64)
    strides: tuple = (2, 2, 1, 1)
    dilations: tuple = (1, 1, 2, 2)
    kernel: int = 3
    in_channels: int = 3
    upsample: str = "nearest"  # or "bilinear"

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 2:
            raise ValueError("need at least 2 classes")
        if not (len(self.channels) == len(self.strides) == len(self.dilations)):
            raise ValueError("channels, strides and dilations must have equal length")
        d = self.downsample
        if d < 1 or (d & (d - 1)) != 0:
            raise ValueError(f"downsample factor {d} is not a power of 2")
        if self.upsample not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")

    @property
    def downsample(self):
        return int(np.prod(self.strides))

    @property
    def num_classes(self):
        return len(self.classes)

    @property
    def feature_dim(self):
        return self.channels[-1]


@dataclass(frozen=True)
class GridGeometry:
    """Maps grid index (row, col) to its pixel block [r*d,(r+1)*d) x [c*d,(c+1)*d)."""

    factor: int

    def grid_shape(self, height, width):
        if height % self.factor or width % self.factor:
            raise ValueError(
                f"image {height}x{width} not divisible by grid factor {self.factor}"
            )
        return height // self.factor, width // self.factor

    def n_grids(self, height, width):
        hf, wf = self.grid_shape(height, width)
        return hf * wf

    def rect(self, row, col):
        d = self.factor
        return row * d, (row + 1) * d, col * d, (col + 1) * d


def _xavier(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    fan_out = shape[0] * int(np.prod(shape[2:]))
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Segmenter:
    """Stateless-given-parameters network; parameters mutate only via the optimizer."""

    def __init__(self, config: SegmenterConfig, rng=None, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.geometry = GridGeometry(config.downsample)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = OrderedDict()
        c_in = config.in_channels
        k = config.kernel
        for i, c_out in enumerate(config.channels, start=1):
            self.params[f"seg.conv{i}.weight"] = nk.Tensor(
                _xavier(rng, (c_out, c_in, k, k), self.dtype),
                requires_grad=True, name=f"seg.conv{i}.weight")
            self.params[f"seg.conv{i}.bias"] = nk.Tensor(
                np.zeros((1, c_out, 1, 1), dtype=self.dtype),
                requires_grad=True, name=f"seg.conv{i}.bias")
            c_in = c_out
        self.params["seg.head.weight"] = nk.Tensor(
            _xavier(rng, (config.num_classes, config.feature_dim, 1, 1), self.dtype),
            requires_grad=True, name="seg.head.weight")
        self.params["seg.head.bias"] = nk.Tensor(
            np.zeros((1, config.num_classes, 1, 1), dtype=self.dtype),
            requires_grad=True, name="seg.head.bias")

    def feature_params(self):
        return [t for n, t in self.params.items() if n.startswith("seg.conv")]

    def head_params(self):
        return [t for n, t in self.params.items() if n.startswith("seg.head")]

    def all_params(self):
        return list(self.params.values())

    def extract_features(self, images):
        """[B,3,H,W] -> [B,D,H/d,W/d]; H and W must be divisible by d."""
        if not isinstance(images, nk.Tensor):
            images = nk.Tensor(np.asarray(images, dtype=self.dtype))
        _, _, h, w = images.shape
        self.geometry.grid_shape(h, w)  # divisibility check
        x = images
        cfg = self.config
        for i, (stride, dil) in enumerate(zip(cfg.strides, cfg.dilations), start=1):
            pad = dil * (cfg.kernel - 1) // 2
            x = nk.conv2d(x, self.params[f"seg.conv{i}.weight"], stride=stride,
                          dilation=dil, padding=pad)
            x = nk.relu(nk.add(x, self.params[f"seg.conv{i}.bias"]))
        return x

    def predict_labels(self, features):
        """Per-grid class logits [B,|C|,H_f,W_f] from a feature map."""
        if features.shape[1] != self.config.feature_dim:
            raise ValueError(
                f"feature dim {features.shape[1]} does not match head "
                f"(expects {self.config.feature_dim})")
        out = nk.conv2d(features, self.params["seg.head.weight"])
        return nk.add(out, self.params["seg.head.bias"])

    def pixel_predictions(self, grid_logits):
        """Upsample grid logits to pixel resolution and softmax over classes."""
        if self.config.upsample == "bilinear":
            up = nk.upsample_bilinear(grid_logits, self.geometry.factor)
        else:
            up = nk.upsample_nearest(grid_logits, self.geometry.factor)
        return nk.softmax_channels(up)

    def task_loss(self, grid_logits, labels):
        """Mean per-pixel cross-entropy against integer labels; 255 is ignored."""
        labels = np.asarray(labels)
        ncls = self.config.num_classes
        bad = (labels != IGNORE_LABEL) & ((labels < 0) | (labels >= ncls))
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValueError(
                f"label {int(labels[idx])} at {idx} outside [0,{ncls}) and not {IGNORE_LABEL}")
        valid = labels != IGNORE_LABEL
        count = int(valid.sum())
        if count == 0:
            return nk.Tensor(np.asarray(0.0, dtype=self.dtype))
        if self.config.upsample == "bilinear":
            up = nk.upsample_bilinear(grid_logits, self.geometry.factor)
        else:
            up = nk.upsample_nearest(grid_logits, self.geometry.factor)
        logp = nk.log_softmax_channels(up)
        onehot = np.zeros(logp.shape, dtype=self.dtype)
        b, h, w = np.nonzero(valid)
        onehot[b, labels[b, h, w], h, w] = 1.0
        picked = nk.mul(logp, nk.Tensor(onehot))
        return nk.mul(nk.sum_all(picked), -1.0 / count)

    # checkpoint IO ---------------------------------------------------------

    def save(self, out_dir):
        save_params(self.params.items(), out_dir)

    def load_state(self, ckpt_dir):
        loaded = load_params(ckpt_dir)
        for name, tensor in self.params.items():
            if name not in loaded:
                raise ValueError(f"checkpoint {ckpt_dir} is missing parameter {name}")
            arr = loaded[name].astype(self.dtype)
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {tensor.data.shape}")
            tensor.data[...] = arr
        return self
