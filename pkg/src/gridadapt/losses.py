"""Adversarial-alignment losses and grid soft-label aggregation.

Grid soft labels are exact class proportions per d x d block on labeled
images and block-averaged pseudo-probabilities on unlabeled ones; the
class-normalized form rescales each class's mass to sum to 1 over one
image's grids, balancing class frequency in the class-wise losses.

Loss scaling: sums over grids within an image, means over the images of a
mini-batch, so magnitudes do not depend on batch size. Probabilities are
clamped to [eps, 1-eps] before any log; clamp events are counted into an
optional diagnostics dict under ``"clamps"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .segmenter import IGNORE_LABEL

CLAMP_EPS = 1e-7


@dataclass
class LossWeights:
    lam_global: float
    lam_class: float

    def __post_init__(self):
        if self.lam_global < 0 or self.lam_class < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class SoftLabelGrid:
    """Per-grid class masses phi [B,C,H_f,W_f] and their normalized form."""

    phi: np.ndarray
    domain: str
    phi_norm: np.ndarray | None = None
    present: np.ndarray | None = None  # [B,C] bool, true where an image has mass


def _validate_labels(labels, num_classes):
    bad = (labels != IGNORE_LABEL) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(
            f"label {int(labels[idx])} at {idx} outside [0,{num_classes}) and not {IGNORE_LABEL}")


def grid_soft_labels_source(labels, geometry, num_classes):
    """Exact per-grid class proportions from ground-truth labels.

    Ignored pixels are excluded from numerator and denominator; a fully
    ignored grid gets an all-zero row (and is skipped by the class-wise
    losses through normalization).
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    _validate_labels(labels, num_classes)
    b, h, w = labels.shape
    hf, wf = geometry.grid_shape(h, w)
    d = geometry.factor
    blocks = labels.reshape(b, hf, d, wf, d)
    valid = (blocks != IGNORE_LABEL).sum(axis=(2, 4))
    counts = np.empty((b, num_classes, hf, wf), dtype=np.float64)
    for c in range(num_classes):
        counts[:, c] = (blocks == c).sum(axis=(2, 4))
    phi = counts / np.maximum(valid, 1)[:, None]
    return SoftLabelGrid(phi=phi, domain="source")


def grid_soft_labels_target(pseudo, geometry):
    """Per-grid mean of per-pixel pseudo-label distributions."""
    pseudo = np.asarray(pseudo)
    if pseudo.ndim == 3:
        pseudo = pseudo[None]
    sums = pseudo.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise ValueError("pseudo-label distributions must sum to 1 per pixel")
    b, c, h, w = pseudo.shape
    hf, wf = geometry.grid_shape(h, w)
    d = geometry.factor
    phi = pseudo.reshape(b, c, hf, d, wf, d).mean(axis=(3, 5))
    return SoftLabelGrid(phi=phi, domain="target")


def normalize_soft_labels(grid):
    """Rescale each class's mass to total 1 over each image's grids.

    Classes with zero mass in an image keep an all-zero row and are flagged
    absent so downstream losses can skip them.
    """
    totals = grid.phi.sum(axis=(2, 3))
    present = totals > 0
    denom = np.where(present, totals, 1.0)
    grid.phi_norm = grid.phi / denom[:, :, None, None]
    grid.present = present
    return grid


def _count_clamps(p, diag):
    if diag is not None:
        n = int(((p.data < CLAMP_EPS) | (p.data > 1.0 - CLAMP_EPS)).sum())
        if n:
            diag["clamps"] = diag.get("clamps", 0) + n


def _log_p(p, diag):
    _count_clamps(p, diag)
    return nk.log(nk.clamp(p, CLAMP_EPS, 1.0 - CLAMP_EPS))


def _log_1mp(p, diag):
    _count_clamps(p, diag)
    return nk.log(nk.clamp(nk.sub(1.0, p), CLAMP_EPS, 1.0 - CLAMP_EPS))


def global_d_loss(p_src, p_tgt, diag=None):
    """Discriminator side of global alignment: score source high, target low."""
    term_s = nk.mul(nk.sum_all(_log_p(p_src, diag)), -1.0 / p_src.shape[0])
    term_t = nk.mul(nk.sum_all(_log_1mp(p_tgt, diag)), -1.0 / p_tgt.shape[0])
    return nk.add(term_s, term_t)


def global_inv_loss(p_src, p_tgt, diag=None):
    """Feature side of global alignment: the same objective with domains flipped."""
    term_s = nk.mul(nk.sum_all(_log_1mp(p_src, diag)), -1.0 / p_src.shape[0])
    term_t = nk.mul(nk.sum_all(_log_p(p_tgt, diag)), -1.0 / p_tgt.shape[0])
    return nk.add(term_s, term_t)


def _weighted_nll(p_by_class, grid, log_fn, diag):
    """Sum over classes of normalized-soft-label-weighted log terms."""
    if grid.phi_norm is None:
        raise ValueError("normalize_soft_labels must run before the class-wise losses")
    total = None
    batch = grid.phi.shape[0]
    for c, p in enumerate(p_by_class):
        if p is None:
            continue
        weights = grid.phi_norm[:, c : c + 1]
        if not weights.any():
            continue
        w = nk.Tensor(np.ascontiguousarray(weights, dtype=p.dtype))
        term = nk.mul(nk.sum_all(nk.mul(log_fn(p, diag), w)), -1.0 / batch)
        total = term if total is None else nk.add(total, term)
    if total is None:
        total = nk.Tensor(np.asarray(0.0))
    return total


def classwise_d_loss(p_src_by_class, p_tgt_by_class, grid_src, grid_tgt, diag=None):
    """Discriminator side of class-wise alignment.

    ``p_*_by_class`` hold one [B,1,H_f,W_f] probability map per class, in
    class order (None for classes skipped upstream); absent classes carry
    zero weight and contribute exactly 0.
    """
    src = _weighted_nll(p_src_by_class, grid_src, _log_p, diag)
    tgt = _weighted_nll(p_tgt_by_class, grid_tgt, _log_1mp, diag)
    return nk.add(src, tgt)


def classwise_inv_loss(p_src_by_class, p_tgt_by_class, grid_src, grid_tgt, diag=None):
    """Feature side of class-wise alignment: domain roles flipped."""
    src = _weighted_nll(p_src_by_class, grid_src, _log_1mp, diag)
    tgt = _weighted_nll(p_tgt_by_class, grid_tgt, _log_p, diag)
    return nk.add(src, tgt)


def _as_total(parts):
    if parts is None:
        return 0.0
    if isinstance(parts, (int, float)):
        return float(parts)
    return float(sum(parts))


def total_loss(task, g_parts, class_parts, weights):
    """Weighted sum of the three objective components (reported, not trained)."""
    return (
        _as_total(task)
        + weights.lam_global * _as_total(g_parts)
        + weights.lam_class * _as_total(class_parts)
    )


def reversal_loss_diagnostic(prob_fn, feat_src, feat_tgt, diag=None):
    """Measure the gradient-vanishing failure of the single minimax objective.

    ``prob_fn`` maps a feature tensor to per-grid source probabilities.
    Evaluates the one-objective formulation (feature extractor ascends the
    discriminator loss) and the split formulation (feature extractor descends
    the flipped loss) on the same features, and reports the feature-gradient
    norm of each. Diagnostic only; never used by the trainer.
    """

    def run(loss_fn):
        fs = nk.Tensor(np.array(feat_src.data, copy=True), requires_grad=True)
        ft = nk.Tensor(np.array(feat_tgt.data, copy=True), requires_grad=True)
        with nk.Tape() as tape:
            loss = loss_fn(prob_fn(fs), prob_fn(ft))
            nk.backward(loss, tape)
        norm = float(np.sqrt((fs.grad ** 2).sum() + (ft.grad ** 2).sum()))
        return loss.item(), norm

    minimax_loss, minimax_norm = run(lambda ps, pt: global_d_loss(ps, pt, diag))
    _, split_norm = run(lambda ps, pt: global_inv_loss(ps, pt, diag))
    return {
        "loss": minimax_loss,
        "grad_norm_minimax": minimax_norm,
        "grad_norm_split": split_norm,
        "ratio": minimax_norm / split_norm if split_norm > 0 else float("inf"),
    }


def format_log_line(step, l_task, l_g_d, l_g_inv, l_class_d, l_class_inv,
                    lam_g, lam_class, clamps):
    return (
        f"step={step} L_task={l_task:.6f} L_G_D={l_g_d:.6f} L_G_inv={l_g_inv:.6f} "
        f"L_class_D={l_class_d:.6f} L_class_inv={l_class_inv:.6f} "
        f"lambda_G={lam_g:.6f} lambda_class={lam_class:.6f} clamps={clamps}"
    )
