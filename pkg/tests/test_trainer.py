import os

import numpy as np
import pytest

import gridadapt.numkit as nk
from gridadapt import trainer
from gridadapt.cityforge import SceneDataset, UnlabeledView, emit_dataset
from gridadapt.trainer import (
    BatchSampler,
    Ramp,
    Schedule,
    TrainConfig,
    lambda_at,
    parse_config,
)


@pytest.fixture(scope="module")
def city(tmp_path_factory):
    root = tmp_path_factory.mktemp("city")
    emit_dataset(8, "source", root / "src", eval_count=2, seed=1, height=32, width=32)
    emit_dataset(8, "target", root / "tgt", with_pairs=True, eval_count=2, seed=2,
                 height=32, width=32)
    return root


def small_config(**kw):
    base = dict(batch_size=2, lr=1e-4, pretrain_lr=1e-4, seed=5, dtype="float32",
                ramp_g_steps=2, ramp_class_steps=2, log_every=1000)
    base.update(kw)
    return TrainConfig(**base)


# -- schedule -----------------------------------------------------------------

def test_lambda_ramp_endpoints_and_midpoint():
    sched = Schedule(Ramp(0, 100, 0.1), Ramp(100, 200, 0.5))
    assert lambda_at(sched, 0).lam_global == 0.0
    assert lambda_at(sched, 0).lam_class == 0.0
    w = lambda_at(sched, 50)
    assert abs(w.lam_global - 0.05) < 1e-12
    w = lambda_at(sched, 500)
    assert (w.lam_global, w.lam_class) == (0.1, 0.5)


def test_lambda_monotone_and_bounded():
    sched = Schedule(Ramp(0, 37, 0.1), Ramp(37, 90, 0.5))
    prev = (0.0, 0.0)
    for step in range(0, 200, 3):
        w = lambda_at(sched, step)
        assert w.lam_global >= prev[0] and w.lam_class >= prev[1]
        assert w.lam_global <= 0.1 and w.lam_class <= 0.5
        prev = (w.lam_global, w.lam_class)


def test_class_ramp_must_follow_global_ramp():
    with pytest.raises(ValueError, match="after the global ramp"):
        Schedule(Ramp(0, 100, 0.1), Ramp(50, 150, 0.5))


def test_negative_step_rejected():
    sched = Schedule.from_config(TrainConfig())
    with pytest.raises(ValueError):
        lambda_at(sched, -1)


# -- config file --------------------------------------------------------------

def test_parse_config_round_trip(tmp_path):
    text = """
# training settings
batch_size = 8
lr = 1e-5
lambda_g_max = 0.2   # bumped
static_classes = road, sky , building
prior_k = 5
dtype = float32
"""
    path = tmp_path / "train.cfg"
    path.write_text(text)
    cfg = parse_config(path)
    assert cfg.batch_size == 8
    assert cfg.lr == 1e-5
    assert cfg.lambda_g_max == 0.2
    assert cfg.static_classes == ("road", "sky", "building")
    assert cfg.prior_k == 5
    assert cfg.dtype == "float32"
    assert cfg.lambda_class_max == 0.5  # untouched default


def test_parse_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rate = 3\n")
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config(path)


def test_parse_config_rejects_malformed_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("batch_size 4\n")
    with pytest.raises(ValueError, match="key = value"):
        parse_config(path)


# -- sampler ------------------------------------------------------------------

def test_batch_sampler_covers_epoch_deterministically():
    s1 = BatchSampler(10, 3, np.random.default_rng(0))
    s2 = BatchSampler(10, 3, np.random.default_rng(0))
    seen = []
    for _ in range(6):
        b1 = s1.next_batch()
        b2 = s2.next_batch()
        np.testing.assert_array_equal(b1, b2)
        seen.extend(b1.tolist())
    assert set(seen[:9]) <= set(range(10))
    state = s1.state_dict()
    s3 = BatchSampler(10, 3, np.random.default_rng(99))
    s3.load_state_dict(state)
    np.testing.assert_array_equal(s1.next_batch(), s3.next_batch())


# -- pre-training -------------------------------------------------------------

def test_pretrain_rejects_unlabeled(city):
    tgt = SceneDataset(city / "tgt", "train")
    with pytest.raises(ValueError, match="labeled"):
        trainer.pretrain_source(tgt, small_config())


def test_pretrain_zero_steps_keeps_initialization(city):
    src = SceneDataset(city / "src", "train")
    cfg = small_config()
    seg0 = trainer.build_segmenter(src.classes, cfg)
    init = {n: t.data.copy() for n, t in seg0.params.items()}
    trainer.pretrain_source(src, cfg, segmenter=seg0, steps=0)
    for n, t in seg0.params.items():
        np.testing.assert_array_equal(t.data, init[n])


def test_pretrain_same_seed_bitwise_identical(city):
    src = SceneDataset(city / "src", "train")
    cfg = small_config()
    a = trainer.pretrain_source(src, cfg, steps=5)
    b = trainer.pretrain_source(src, cfg, steps=5)
    for n in a.params:
        np.testing.assert_array_equal(a.params[n].data, b.params[n].data)


class _OneSample:
    """Single in-memory sample; labels are constant per 4x4 block so the
    grid-resolution head can actually reach zero loss."""

    def __init__(self, image, label, classes):
        self._image = image
        self._label = label
        self.classes = classes

    def __len__(self):
        return 1

    def image(self, index):
        return self._image

    def label(self, index):
        return self._label

    def has_labels(self):
        return True


def test_pretrain_overfits_single_sample(tmp_path):
    emit_dataset(1, "source", tmp_path / "one", seed=9, height=32, width=32)
    ds = SceneDataset(tmp_path / "one", "train")
    label = ds.label(0)
    # project labels to their block majority: the achievable optimum is then 0
    blocks = label.reshape(8, 4, 8, 4)
    pure = np.zeros((8, 8), dtype=np.uint8)
    best = np.full((8, 8), -1)
    for c in range(6):
        cnt = (blocks == c).sum(axis=(1, 3))
        pure = np.where(cnt > best, c, pure).astype(np.uint8)
        best = np.maximum(best, cnt)
    sample = _OneSample(ds.image(0), np.kron(pure, np.ones((4, 4), dtype=np.uint8)),
                        ds.classes)

    cfg = small_config(batch_size=1, pretrain_lr=1e-3, seed=1)
    seg = trainer.pretrain_source(sample, cfg, steps=2000)
    feats = seg.extract_features(nk.Tensor(
        np.moveaxis(sample.image(0), 2, 0)[None].astype(np.float32) / 255.0))
    loss = seg.task_loss(seg.predict_labels(feats), sample.label(0)[None])
    assert loss.item() < 0.05


# -- adaptation ---------------------------------------------------------------

def _zero_schedule(cfg):
    return Schedule(Ramp(0, 1, 0.0), Ramp(1, 2, 0.0))


def test_adapt_with_zero_lambdas_equals_source_only_training(city):
    src = SceneDataset(city / "src", "train")
    tgt = SceneDataset(city / "tgt", "train")
    cfg = small_config(lambda_g_max=0.0, lambda_class_max=0.0)

    pre = trainer.pretrain_source(src, cfg, steps=4)
    ref = trainer.build_segmenter(src.classes, cfg)
    for n, t in ref.params.items():
        t.data[...] = pre.params[n].data
    # continued source-only training
    trainer.pretrain_source(src, cfg, segmenter=ref, steps=6)

    adapted = trainer.pretrain_source(src, cfg, steps=4)
    trainer.adapt(src, tgt, adapted, cfg, schedule=_zero_schedule(cfg), steps=6)

    for n in ref.params:
        np.testing.assert_array_equal(adapted.params[n].data, ref.params[n].data)


def test_adapt_determinism_bitwise(city):
    src = SceneDataset(city / "src", "train")
    tgt = SceneDataset(city / "tgt", "train")
    cfg = small_config(adapt_steps=6)

    def run():
        seg = trainer.pretrain_source(src, cfg, steps=3)
        state = trainer.adapt(src, tgt, seg, cfg, steps=6)
        return state

    s1, s2 = run(), run()
    for n in s1.segmenter.params:
        np.testing.assert_array_equal(s1.segmenter.params[n].data,
                                      s2.segmenter.params[n].data)
    for n in s1.gdisc.params:
        np.testing.assert_array_equal(s1.gdisc.params[n].data, s2.gdisc.params[n].data)
    for n in s1.bank.params:
        np.testing.assert_array_equal(s1.bank.params[n].data, s2.bank.params[n].data)


def test_adapt_rejects_unlabeled_source(city):
    tgt = SceneDataset(city / "tgt", "train")
    cfg = small_config()
    seg = trainer.build_segmenter(tgt.classes, cfg)
    with pytest.raises(ValueError, match="labeled source"):
        trainer.adapt(tgt, tgt, seg, cfg, steps=1)


def test_adapt_prior_length_mismatch_rejected(city):
    src = SceneDataset(city / "src", "train")
    tgt = SceneDataset(city / "tgt", "train")
    cfg = small_config()
    seg = trainer.build_segmenter(src.classes, cfg)
    with pytest.raises(ValueError, match="priors"):
        trainer.adapt(src, tgt, seg, cfg, priors=[None], steps=1)


def test_poisoned_target_labels_change_nothing(city, tmp_path):
    src = SceneDataset(city / "src", "train")
    cfg = small_config(adapt_steps=4)

    emit_dataset(8, "target", tmp_path / "tgt2", with_pairs=True, seed=2,
                 height=32, width=32)

    def run():
        tgt = SceneDataset(tmp_path / "tgt2", "train", cache=False)
        seg = trainer.pretrain_source(src, cfg, steps=2)
        return trainer.adapt(src, tgt, seg, cfg, steps=4).segmenter

    clean = run()
    # poison: drop garbage label files into the unlabeled target split
    for sid in sorted(os.listdir(tmp_path / "tgt2" / "train")):
        bad = np.full((32, 32), 3, dtype=np.uint8)
        from gridadapt.cityforge import write_pgm
        write_pgm(tmp_path / "tgt2" / "train" / sid / "label.pgm", bad)
    poisoned = run()
    for n in clean.params:
        np.testing.assert_array_equal(clean.params[n].data, poisoned.params[n].data)


def test_update_isolation_between_phases(city, monkeypatch):
    src = SceneDataset(city / "src", "train")
    tgt = SceneDataset(city / "tgt", "train")
    cfg = small_config(ramp_g_steps=0, ramp_class_steps=0)  # both lambdas at peak
    seg = trainer.pretrain_source(src, cfg, steps=2)

    state = trainer.init_adapt_state(src, UnlabeledView(tgt), seg, cfg)
    seg_names = set(seg.params)
    watched = list(seg.params.items()) + list(state.gdisc.params.items()) \
        + list(state.bank.params.items())
    real_step = nk.adam_step
    calls = []

    def spy(params, opt_state):
        before = {n: t.data.copy() for n, t in watched}
        real_step(params, opt_state)
        changed = {n for n, t in watched if not np.array_equal(before[n], t.data)}
        calls.append(changed)

    monkeypatch.setattr(trainer.nk, "adam_step", spy)
    trainer.adapt(src, tgt, seg, cfg, state=state, steps=1)
    monkeypatch.undo()

    assert len(calls) == 2
    disc_changed, feat_changed = calls
    assert disc_changed and not (disc_changed & seg_names)
    assert feat_changed and feat_changed <= seg_names


def test_train_state_resume_is_bitwise_identical(city, tmp_path):
    src = SceneDataset(city / "src", "train")
    tgt = SceneDataset(city / "tgt", "train")
    cfg = small_config(refresh_every=3)

    def fresh_seg():
        return trainer.pretrain_source(src, cfg, steps=2)

    full = trainer.adapt(src, tgt, fresh_seg(), cfg, steps=9)

    seg2 = fresh_seg()
    state = trainer.adapt(src, tgt, seg2, cfg, steps=4)
    trainer.save_train_state(state, tmp_path / "state")

    seg3 = fresh_seg()
    resumed = trainer.init_adapt_state(src, UnlabeledView(tgt), seg3, cfg)
    trainer.load_train_state(resumed, tmp_path / "state")
    assert resumed.step == 4
    trainer.adapt(src, tgt, seg3, cfg, state=resumed, steps=5)

    for n in full.segmenter.params:
        np.testing.assert_array_equal(full.segmenter.params[n].data,
                                      resumed.segmenter.params[n].data)
    for n in full.gdisc.params:
        np.testing.assert_array_equal(full.gdisc.params[n].data,
                                      resumed.gdisc.params[n].data)
    for n in full.bank.params:
        np.testing.assert_array_equal(full.bank.params[n].data,
                                      resumed.bank.params[n].data)


# -- pseudo-label cache --------------------------------------------------------

def test_refresh_idempotent_and_normalized(city):
    src = SceneDataset(city / "src", "train")
    tgt = UnlabeledView(SceneDataset(city / "tgt", "train"))
    cfg = small_config()
    seg = trainer.pretrain_source(src, cfg, steps=2)
    state = trainer.init_adapt_state(src, tgt, seg, cfg)
    static_ids = trainer._resolve_static_ids(src.classes, cfg)

    trainer.refresh_pseudo_labels(state, tgt, None, static_ids, cfg)
    first = [arr.copy() for arr in state.pseudo_cache]
    trainer.refresh_pseudo_labels(state, tgt, None, static_ids, cfg)
    for a, b in zip(first, state.pseudo_cache):
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-5)


def test_refresh_with_priors_zeroes_non_static_mass(city):
    src = SceneDataset(city / "src", "train")
    tgt = UnlabeledView(SceneDataset(city / "tgt", "train"))
    cfg = small_config()
    seg = trainer.pretrain_source(src, cfg, steps=2)
    state = trainer.init_adapt_state(src, tgt, seg, cfg)
    static_ids = trainer._resolve_static_ids(src.classes, cfg)
    non_static = [c for c in range(len(src.classes)) if c not in static_ids]

    rng = np.random.default_rng(0)
    priors = [rng.random((32, 32)) < 0.4 for _ in range(len(tgt))]
    trainer.refresh_pseudo_labels(state, tgt, priors, static_ids, cfg)
    for arr, mask in zip(state.pseudo_cache, priors):
        refined = arr[:, mask]
        static_sum = arr[static_ids][:, mask].sum(axis=0)
        covered = static_sum > 0
        assert np.all(arr[non_static][:, mask][:, covered] == 0.0)
        np.testing.assert_allclose(static_sum[covered], 1.0, atol=1e-5)
