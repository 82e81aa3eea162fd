"""Two-phase optimization: source pre-training, then unsupervised adaptation.

Adaptation alternates, once per mini-batch: (a) update the discriminators
on detached features, (b) update the feature extractor and label head on
the task loss plus the lambda-weighted flipped adversarial losses with the
discriminators frozen. Pseudo labels for the class-wise losses are cached
and refreshed on a configured cadence, refined by the static prior where
masks are supplied. The target dataset is accessed through a view that
hard-fails on any label read.

Config files are flat UTF-8 ``key = value`` lines with ``#`` comments.
"""

from __future__ import annotations

import json
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, fields, replace

import numpy as np

from . import numkit as nk
from . import losses
from .checkpoint import load_params, save_params
from .cityforge import STATIC_CLASSES, UnlabeledView, images_to_batch
from .discriminators import ClasswiseDiscriminatorBank, GlobalDiscriminator
from .prior import refine_pseudo_labels, static_class_ids
from .segmenter import Segmenter, SegmenterConfig


@dataclass(frozen=True)
class Ramp:
    start: int
    end: int
    peak: float

    def value(self, step):
        if self.peak == 0.0 or step <= self.start:
            return 0.0
        if step >= self.end or self.end <= self.start:
            return self.peak
        return self.peak * (step - self.start) / (self.end - self.start)


@dataclass(frozen=True)
class Schedule:
    global_ramp: Ramp
    class_ramp: Ramp

    def __post_init__(self):
        if self.class_ramp.peak > 0 and self.class_ramp.start < self.global_ramp.end:
            raise ValueError(
                "class-wise ramp must start at or after the global ramp ends")

    @classmethod
    def from_config(cls, config):
        g = Ramp(0, config.ramp_g_steps, config.lambda_g_max)
        c = Ramp(config.ramp_g_steps, config.ramp_g_steps + config.ramp_class_steps,
                 config.lambda_class_max)
        return cls(global_ramp=g, class_ramp=c)


def lambda_at(schedule, step):
    if step < 0:
        raise ValueError("step must be >= 0")
    return losses.LossWeights(
        lam_global=schedule.global_ramp.value(step),
        lam_class=schedule.class_ramp.value(step),
    )


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr: float = 5e-6
    pretrain_lr: float = 1e-3
    pretrain_steps: int = 2000
    adapt_steps: int = 2000
    lambda_g_max: float = 0.1
    lambda_class_max: float = 0.5
    ramp_g_steps: int = 500
    ramp_class_steps: int = 500
    alt_ratio: int = 1
    refresh_every: int = 0  # 0: once per pass over the target set
    seed: int = 0
    static_classes: tuple = ()
    prior_k: int = 3
    dtype: str = "float64"
    upsample: str = "nearest"
    log_every: int = 25

    def np_dtype(self):
        return np.dtype(self.dtype)


def parse_config(path):
    """Read a flat `key = value` config file into a TrainConfig."""
    known = {f.name: f for f in fields(TrainConfig)}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected `key = value`")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            ftype = known[key].type
            if key == "static_classes":
                values[key] = tuple(v.strip() for v in val.split(",") if v.strip())
            elif ftype == "int":
                values[key] = int(val)
            elif ftype == "float":
                values[key] = float(val)
            else:
                values[key] = val
    return TrainConfig(**values)


class BatchSampler:
    """Epoch-shuffled index batches from a private RNG stream."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.perm = None
        self.pos = 0

    def next_batch(self):
        if self.perm is None or self.pos + self.batch_size > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        take = min(self.batch_size, self.n)
        out = self.perm[self.pos : self.pos + take]
        self.pos += take
        return out

    def state_dict(self):
        return {
            "rng": self.rng.bit_generator.state,
            "perm": None if self.perm is None else self.perm.tolist(),
            "pos": self.pos,
        }

    def load_state_dict(self, state):
        self.rng.bit_generator.state = state["rng"]
        self.perm = None if state["perm"] is None else np.asarray(state["perm"])
        self.pos = state["pos"]


def _stream(seed, tag):
    return np.random.default_rng([int(seed), tag])


@contextmanager
def _frozen(params):
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def build_segmenter(classes, config, init_seed_tag=10):
    seg_cfg = SegmenterConfig(classes=tuple(classes), upsample=config.upsample)
    return Segmenter(seg_cfg, rng=_stream(config.seed, init_seed_tag),
                     dtype=config.np_dtype())


# -- source pre-training ------------------------------------------------------

def pretrain_source(dataset, config, segmenter=None, steps=None, out_dir=None,
                    log=None):
    """Train the feature extractor and label head on labeled source data only."""
    if not dataset.has_labels():
        raise ValueError("pre-training needs a labeled dataset")
    seg = segmenter or build_segmenter(dataset.classes, config)
    steps = config.pretrain_steps if steps is None else steps
    sampler = BatchSampler(len(dataset), config.batch_size, _stream(config.seed, 20))
    opt = nk.AdamState(seg.all_params(), lr=config.pretrain_lr)
    dtype = config.np_dtype()
    for step in range(steps):
        idx = sampler.next_batch()
        images = images_to_batch([dataset.image(i) for i in idx], dtype)
        labels = np.stack([dataset.label(i) for i in idx])
        with nk.Tape() as tape:
            feats = seg.extract_features(nk.Tensor(images))
            loss = seg.task_loss(seg.predict_labels(feats), labels)
            nk.backward(loss, tape)
        nk.adam_step(seg.all_params(), opt)
        if log is not None and (step % config.log_every == 0 or step == steps - 1):
            log.append(f"step={step} L_task={loss.item():.6f}")
    if out_dir:
        seg.save(out_dir)
    return seg


# -- pseudo labels ------------------------------------------------------------

def pixel_pseudo_labels(seg, images_u8, prior_masks, static_ids):
    """Current-model pixel distributions, prior-refined where masks exist."""
    batch = images_to_batch(images_u8, seg.dtype)
    feats = seg.extract_features(nk.Tensor(batch))
    probs = seg.pixel_predictions(seg.predict_labels(feats)).data
    out = []
    for i in range(probs.shape[0]):
        phi = probs[i]
        mask = prior_masks[i] if prior_masks is not None else None
        if mask is not None and mask.any():
            phi = refine_pseudo_labels(phi, mask, static_ids)
        out.append(phi.astype(np.float32))
    return out


def refresh_pseudo_labels(state, target_view, priors, static_ids, config):
    """Recompute the whole target pseudo-label cache with current parameters."""
    cache = []
    n = len(target_view)
    chunk = max(config.batch_size, 1)
    for start in range(0, n, chunk):
        idx = list(range(start, min(start + chunk, n)))
        images = [target_view.image(i) for i in idx]
        masks = None if priors is None else [priors[i] for i in idx]
        cache.extend(pixel_pseudo_labels(state.segmenter, images, masks, static_ids))
    state.pseudo_cache = cache
    state.refresh_step = state.step
    return state


# -- adaptation ---------------------------------------------------------------

@dataclass
class TrainState:
    segmenter: Segmenter
    gdisc: GlobalDiscriminator
    bank: ClasswiseDiscriminatorBank
    opt_feat: nk.AdamState
    opt_disc: nk.AdamState
    src_sampler: BatchSampler
    tgt_sampler: BatchSampler
    step: int = 0
    refresh_step: int = -1
    pseudo_cache: list | None = None


def init_adapt_state(source_dataset, target_view, segmenter, config):
    classes = source_dataset.classes
    gdisc = GlobalDiscriminator(segmenter.config.feature_dim,
                                rng=_stream(config.seed, 11), dtype=segmenter.dtype)
    bank = ClasswiseDiscriminatorBank(classes, segmenter.config.feature_dim,
                                      rng=_stream(config.seed, 12), dtype=segmenter.dtype)
    return TrainState(
        segmenter=segmenter,
        gdisc=gdisc,
        bank=bank,
        opt_feat=nk.AdamState(segmenter.all_params(), lr=config.lr),
        opt_disc=nk.AdamState(gdisc.all_params() + bank.all_params(), lr=config.lr),
        src_sampler=BatchSampler(len(source_dataset), config.batch_size,
                                 _stream(config.seed, 20)),
        tgt_sampler=BatchSampler(len(target_view), config.batch_size,
                                 _stream(config.seed, 21)),
    )


def _resolve_static_ids(classes, config):
    names = config.static_classes or tuple(c for c in STATIC_CLASSES if c in classes)
    return static_class_ids(classes, names)


def adapt(source_dataset, target_dataset, segmenter, config, schedule=None,
          priors=None, steps=None, state=None, out_dir=None, log=None):
    """Unsupervised adaptation; returns the TrainState after the step budget.

    ``priors`` is an optional sequence (aligned with the target dataset) of
    boolean static-prior masks or None entries. Target labels are
    unreachable by construction: the dataset is wrapped in an UnlabeledView.
    """
    target = target_dataset if isinstance(target_dataset, UnlabeledView) \
        else UnlabeledView(target_dataset)
    if not source_dataset.has_labels():
        raise ValueError("adaptation needs a labeled source dataset")
    if priors is not None and len(priors) != len(target):
        raise ValueError(f"got {len(priors)} priors for {len(target)} target images")

    schedule = schedule or Schedule.from_config(config)
    state = state or init_adapt_state(source_dataset, target, segmenter, config)
    seg, gdisc, bank = state.segmenter, state.gdisc, state.bank
    classes = source_dataset.classes
    ncls = len(classes)
    static_ids = _resolve_static_ids(classes, config)
    dtype = config.np_dtype()
    geometry = seg.geometry
    total = state.step + (config.adapt_steps if steps is None else steps)
    refresh_every = config.refresh_every or max(
        1, math.ceil(len(target) / config.batch_size))
    class_on = schedule.class_ramp.peak > 0

    while state.step < total:
        step = state.step
        lam = lambda_at(schedule, step)
        diag = {}
        class_active = class_on and step >= schedule.class_ramp.start

        if class_active and state.pseudo_cache is None:
            refresh_pseudo_labels(state, target, priors, static_ids, config)

        # (b) discriminator phase(s) on detached features; the last batch is
        # reused by the feature phase (alternation ratio alt_ratio : 1)
        for _ in range(max(config.alt_ratio, 1)):
            src_idx = state.src_sampler.next_batch()
            tgt_idx = state.tgt_sampler.next_batch()
            xs = images_to_batch([source_dataset.image(i) for i in src_idx], dtype)
            xt = images_to_batch([target.image(i) for i in tgt_idx], dtype)
            ys = np.stack([source_dataset.label(i) for i in src_idx])

            grid_src = grid_tgt = None
            if class_active:
                grid_src = losses.normalize_soft_labels(
                    losses.grid_soft_labels_source(ys, geometry, ncls))
                pseudo = np.stack(
                    [state.pseudo_cache[i] for i in tgt_idx]).astype(np.float64)
                grid_tgt = losses.normalize_soft_labels(
                    losses.grid_soft_labels_target(pseudo, geometry))

            fs_const = seg.extract_features(nk.Tensor(xs))  # no tape: detached
            ft_const = seg.extract_features(nk.Tensor(xt))
            with nk.Tape() as tape:
                p_s = gdisc.prob(fs_const)
                p_t = gdisc.prob(ft_const)
                d_loss = losses.global_d_loss(p_s, p_t, diag)
                phase = d_loss
                cd_loss = None
                if class_active:
                    pc_s = [bank.prob(fs_const, classes[c]) if grid_src.present[:, c].any()
                            else None for c in range(ncls)]
                    pc_t = [bank.prob(ft_const, classes[c]) if grid_tgt.present[:, c].any()
                            else None for c in range(ncls)]
                    cd_loss = losses.classwise_d_loss(pc_s, pc_t, grid_src, grid_tgt, diag)
                    phase = nk.add(phase, cd_loss)
                nk.backward(phase, tape)
            nk.adam_step(state.opt_disc.params, state.opt_disc)
        disc_acc = 0.5 * ((p_s.data >= 0.5).mean() + (p_t.data < 0.5).mean())

        # (c) feature phase with discriminators frozen
        ginv_val = cinv_val = 0.0
        with _frozen(state.opt_disc.params):
            with nk.Tape() as tape:
                fs = seg.extract_features(nk.Tensor(xs))
                task = seg.task_loss(seg.predict_labels(fs), ys)
                floss = task
                ft = None
                if lam.lam_global > 0 or (class_active and lam.lam_class > 0):
                    ft = seg.extract_features(nk.Tensor(xt))
                if lam.lam_global > 0:
                    ginv = losses.global_inv_loss(gdisc.prob(fs), gdisc.prob(ft), diag)
                    ginv_val = ginv.item()
                    floss = nk.add(floss, nk.mul(ginv, lam.lam_global))
                if class_active and lam.lam_class > 0:
                    pc_s = [bank.prob(fs, classes[c]) if grid_src.present[:, c].any()
                            else None for c in range(ncls)]
                    pc_t = [bank.prob(ft, classes[c]) if grid_tgt.present[:, c].any()
                            else None for c in range(ncls)]
                    cinv = losses.classwise_inv_loss(pc_s, pc_t, grid_src, grid_tgt, diag)
                    cinv_val = cinv.item()
                    floss = nk.add(floss, nk.mul(cinv, lam.lam_class))
                nk.backward(floss, tape)
        nk.adam_step(seg.all_params(), state.opt_feat)

        state.step += 1
        if class_active and (state.step - state.refresh_step) >= refresh_every:
            refresh_pseudo_labels(state, target, priors, static_ids, config)

        if log is not None and (step % config.log_every == 0 or state.step == total):
            line = losses.format_log_line(
                step, task.item(), d_loss.item(), ginv_val,
                cd_loss.item() if cd_loss is not None else 0.0, cinv_val,
                lam.lam_global, lam.lam_class, diag.get("clamps", 0))
            log.append(line + f" disc_acc={disc_acc:.3f}")

    if out_dir:
        seg.save(os.path.join(out_dir, "segmenter"))
        save_params(list(gdisc.params.items()) + list(bank.params.items()),
                    os.path.join(out_dir, "discriminators"))
    return state


# -- train-state serialization -------------------------------------------------

def save_train_state(state, out_dir):
    """Persist everything needed to resume training bit for bit."""
    os.makedirs(out_dir, exist_ok=True)
    state.segmenter.save(os.path.join(out_dir, "segmenter"))
    save_params(list(state.gdisc.params.items()) + list(state.bank.params.items()),
                os.path.join(out_dir, "discriminators"))
    for tag, opt in (("feat", state.opt_feat), ("disc", state.opt_disc)):
        pairs = []
        for p, m, v in zip(opt.params, opt.m, opt.v):
            pairs.append((f"m.{p.name}", m))
            pairs.append((f"v.{p.name}", v))
        save_params(pairs, os.path.join(out_dir, f"adam_{tag}"))
    cache_dir = os.path.join(out_dir, "pseudo")
    if state.pseudo_cache is not None:
        os.makedirs(cache_dir, exist_ok=True)
        for i, arr in enumerate(state.pseudo_cache):
            nk.write_tensor(os.path.join(cache_dir, f"{i:05d}.tnsr"), arr)
    meta = {
        "step": state.step,
        "refresh_step": state.refresh_step,
        "opt_feat_steps": state.opt_feat.step_count,
        "opt_disc_steps": state.opt_disc.step_count,
        "src_sampler": state.src_sampler.state_dict(),
        "tgt_sampler": state.tgt_sampler.state_dict(),
        "cache_len": 0 if state.pseudo_cache is None else len(state.pseudo_cache),
    }
    with open(os.path.join(out_dir, "state.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh)


def load_train_state(state, in_dir):
    """Restore a saved training state into a freshly initialized one."""
    with open(os.path.join(in_dir, "state.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    state.segmenter.load_state(os.path.join(in_dir, "segmenter"))
    disc = load_params(os.path.join(in_dir, "discriminators"))
    for target in (state.gdisc, state.bank):
        for name, tensor in target.params.items():
            tensor.data[...] = disc[name].astype(target.dtype)
    for tag, opt in (("feat", state.opt_feat), ("disc", state.opt_disc)):
        stored = load_params(os.path.join(in_dir, f"adam_{tag}"))
        for p, m, v in zip(opt.params, opt.m, opt.v):
            m[...] = stored[f"m.{p.name}"]
            v[...] = stored[f"v.{p.name}"]
    state.opt_feat.step_count = meta["opt_feat_steps"]
    state.opt_disc.step_count = meta["opt_disc_steps"]
    state.src_sampler.load_state_dict(meta["src_sampler"])
    state.tgt_sampler.load_state_dict(meta["tgt_sampler"])
    state.step = meta["step"]
    state.refresh_step = meta["refresh_step"]
    if meta["cache_len"]:
        state.pseudo_cache = [
            nk.read_tensor(os.path.join(in_dir, "pseudo", f"{i:05d}.tnsr"))
            for i in range(meta["cache_len"])
        ]
    else:
        state.pseudo_cache = None
    return state
