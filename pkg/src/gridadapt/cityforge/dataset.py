"""On-disk dataset access and the supervision-leak guard."""

from __future__ import annotations

import os

import numpy as np

from .netpbm import read_pgm, read_ppm


class LabelAccessError(RuntimeError):
    """Raised when adaptation code touches target-domain labels."""


class SceneDataset:
    """Reader for one split of an emitted dataset tree.

    Decoded images are memoized (samples are small and reread every epoch);
    callers must treat returned arrays as read-only.
    """

    def __init__(self, root, split="train", cache=True):
        self.root = str(root)
        self.split = split
        self._cache = {} if cache else None
        classes_path = os.path.join(self.root, "classes.txt")
        if not os.path.isfile(classes_path):
            raise ValueError(f"{self.root}: missing classes.txt, not a dataset root")
        with open(classes_path, encoding="utf-8") as fh:
            self.classes = tuple(line.strip() for line in fh if line.strip())
        split_dir = os.path.join(self.root, split)
        if not os.path.isdir(split_dir):
            raise ValueError(f"{self.root}: no {split}/ split")
        self.ids = sorted(
            d for d in os.listdir(split_dir)
            if os.path.isdir(os.path.join(split_dir, d)))
        if not self.ids:
            raise ValueError(f"{split_dir}: empty split")

    def __len__(self):
        return len(self.ids)

    def _path(self, index, name):
        return os.path.join(self.root, self.split, self.ids[index], name)

    def _memo(self, key, loader):
        if self._cache is None:
            return loader()
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    def image(self, index):
        return self._memo(("image", index), lambda: read_ppm(self._path(index, "image.ppm")))

    def label(self, index):
        path = self._path(index, "label.pgm")
        if not os.path.isfile(path):
            raise ValueError(f"{path}: sample has no label")
        return self._memo(("label", index), lambda: read_pgm(path))

    def has_labels(self):
        return os.path.isfile(self._path(0, "label.pgm"))

    def has_partners(self):
        return os.path.isfile(self._path(0, "partner.ppm"))

    def partner(self, index):
        path = self._path(index, "partner.ppm")
        if not os.path.isfile(path):
            return None
        return self._memo(("partner", index), lambda: read_ppm(path))

    def static_mask(self, index):
        path = self._path(index, "static.pgm")
        if not os.path.isfile(path):
            return None
        return read_pgm(path) > 127


class UnlabeledView:
    """Dataset facade for adaptation: any label access is a hard failure."""

    def __init__(self, dataset):
        self._ds = dataset
        self.classes = dataset.classes
        self.ids = dataset.ids

    def __len__(self):
        return len(self._ds)

    def image(self, index):
        return self._ds.image(index)

    def partner(self, index):
        return self._ds.partner(index)

    def has_partners(self):
        return self._ds.has_partners()

    def has_labels(self):
        return False

    def label(self, index):
        raise LabelAccessError(
            "target-domain labels are sealed during adaptation")

    def static_mask(self, index):
        raise LabelAccessError(
            "target-domain static-mask ground truth is sealed during adaptation")


def images_to_batch(images, dtype=np.float64):
    """Stack uint8 [H,W,3] images into a [B,3,H,W] float array scaled to [0,1]."""
    arr = np.stack([np.moveaxis(img, 2, 0) for img in images])
    return arr.astype(dtype) / 255.0
