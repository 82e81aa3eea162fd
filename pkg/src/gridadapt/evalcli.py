"""Segmentation metrics, discriminator diagnostics and embedding export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .cityforge import images_to_batch
from .segmenter import IGNORE_LABEL


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions; 255 pixels excluded."""

    counts: np.ndarray  # [C,C] int64

    @property
    def num_classes(self):
        return self.counts.shape[0]

    def total(self):
        return int(self.counts.sum())

    def merge(self, other):
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class EvalReport:
    iou: np.ndarray          # [C], nan for absent classes
    present: np.ndarray      # [C] bool, class appears in ground truth
    miou: float              # mean IoU over present classes
    pixel_accuracy: float
    samples: int = 0


def confusion(pred, gt, num_classes):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    keep = gt != IGNORE_LABEL
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise ValueError(f"prediction outside [0,{num_classes})")
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise ValueError(f"ground-truth label outside [0,{num_classes})")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def miou(cm):
    """Per-class IoU and their mean; classes absent from ground truth excluded."""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fn = counts.sum(axis=1) - tp
    fp = counts.sum(axis=0) - tp
    present = counts.sum(axis=1) > 0
    iou = np.full(cm.num_classes, np.nan)
    denom = tp + fp + fn
    nz = present & (denom > 0)
    iou[nz] = tp[nz] / denom[nz]
    mean = float(np.nanmean(iou[present])) if present.any() else 0.0
    total = counts.sum()
    acc = float(tp.sum() / total) if total else 0.0
    return EvalReport(iou=iou, present=present, miou=mean, pixel_accuracy=acc)


def predict_labels_u8(seg, images_u8, batch_size=8):
    """Argmax pixel labels for a list of uint8 images (no gradients recorded)."""
    out = []
    for start in range(0, len(images_u8), batch_size):
        batch = images_to_batch(images_u8[start : start + batch_size], seg.dtype)
        feats = seg.extract_features(nk.Tensor(batch))
        probs = seg.pixel_predictions(seg.predict_labels(feats)).data
        out.extend(np.argmax(probs, axis=1).astype(np.uint8))
    return out


def evaluate_segmenter(seg, dataset, batch_size=8):
    """Confusion-based report over a labeled dataset split."""
    ncls = seg.config.num_classes
    cm = ConfusionMatrix(np.zeros((ncls, ncls), dtype=np.int64))
    n = len(dataset)
    for start in range(0, n, batch_size):
        idx = list(range(start, min(start + batch_size, n)))
        preds = predict_labels_u8(seg, [dataset.image(i) for i in idx], batch_size)
        for j, i in enumerate(idx):
            cm = cm.merge(confusion(preds[j], dataset.label(i), ncls))
    report = miou(cm)
    report.samples = n
    return report


def disc_accuracy_from_probs(p_src, p_tgt):
    """Fraction of grids classified to their true domain; p = 0.5 counts source."""
    p_src = np.asarray(p_src)
    p_tgt = np.asarray(p_tgt)
    correct = int((p_src >= 0.5).sum() + (p_tgt < 0.5).sum())
    return correct / (p_src.size + p_tgt.size)


def disc_accuracy(seg, gdisc, source_images_u8, target_images_u8):
    """Grid-level domain accuracy of the global discriminator on two batches."""
    xs = images_to_batch(source_images_u8, seg.dtype)
    xt = images_to_batch(target_images_u8, seg.dtype)
    p_s = gdisc.prob(seg.extract_features(nk.Tensor(xs))).data
    p_t = gdisc.prob(seg.extract_features(nk.Tensor(xt))).data
    return disc_accuracy_from_probs(p_s, p_t)


def _grid_majority(labelmap, d, num_classes):
    """Dominant class per d x d block (ignore pixels never win a block)."""
    hf, wf = labelmap.shape[0] // d, labelmap.shape[1] // d
    blocks = labelmap.reshape(hf, d, wf, d)
    grid_cls = np.zeros((hf, wf), dtype=np.int64)
    best = np.full((hf, wf), -1)
    for c in range(num_classes):
        cnt = (blocks == c).sum(axis=(1, 3))
        grid_cls = np.where(cnt > best, c, grid_cls)
        best = np.maximum(best, cnt)
    return grid_cls


def export_embeddings(seg, dataset, out_path, domain, use_labels=True, batch_size=8):
    """Per-image, per-present-class mean grid features as UTF-8 records.

    Record format: `domain class_id v1 v2 ... vD`. Class pooling uses the
    dominant class of each grid, from labels when available, otherwise from
    the model's own predictions.
    """
    d = seg.geometry.factor
    ncls = seg.config.num_classes
    records = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        n = len(dataset)
        for start in range(0, n, batch_size):
            idx = list(range(start, min(start + batch_size, n)))
            images = [dataset.image(i) for i in idx]
            batch = images_to_batch(images, seg.dtype)
            feats = seg.extract_features(nk.Tensor(batch)).data
            if not use_labels:
                preds = predict_labels_u8(seg, images, batch_size)
            for j, i in enumerate(idx):
                labelmap = dataset.label(i) if use_labels else preds[j]
                grid_cls = _grid_majority(labelmap, d, ncls)
                for c in range(ncls):
                    sel = grid_cls == c
                    if not sel.any():
                        continue
                    mean_feat = feats[j][:, sel].mean(axis=1)
                    vals = " ".join(f"{v:.6f}" for v in mean_feat)
                    fh.write(f"{domain} {c} {vals}\n")
                    records += 1
    return records


def write_report(report, classes, path):
    """Machine-readable `class=<name> iou=<float>` lines plus the mean."""
    with open(path, "w", encoding="utf-8") as fh:
        for c, name in enumerate(classes):
            if report.present[c]:
                fh.write(f"class={name} iou={report.iou[c]:.6f}\n")
        fh.write(f"miou={report.miou:.6f}\n")


def format_report(report, classes):
    lines = [f"{'class':<14} {'IoU':>8}"]
    for c, name in enumerate(classes):
        if report.present[c]:
            lines.append(f"{name:<14} {report.iou[c]:>8.4f}")
        else:
            lines.append(f"{name:<14} {'absent':>8}")
    lines.append(f"{'mIoU':<14} {report.miou:>8.4f}")
    lines.append(f"{'pixel acc':<14} {report.pixel_accuracy:>8.4f}")
    return "\n".join(lines)
