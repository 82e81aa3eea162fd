import numpy as np
import pytest

from gridadapt import evalcli, trainer
from gridadapt.cityforge import SceneDataset, emit_dataset
from gridadapt.discriminators import GlobalDiscriminator

from oracles import miou_from_sets


def confusion_pixel_loop(pred, gt, num_classes):
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g != 255:
            counts[g, p] += 1
    return counts


def test_confusion_perfect_prediction_is_diagonal():
    gt = np.random.default_rng(0).integers(0, 4, size=(8, 8))
    cm = evalcli.confusion(gt, gt, 4)
    assert cm.total() == 64
    off = cm.counts - np.diag(np.diag(cm.counts))
    assert off.sum() == 0


def test_confusion_fully_ignored_is_empty():
    gt = np.full((4, 4), 255)
    cm = evalcli.confusion(np.zeros((4, 4), dtype=int), gt, 3)
    assert cm.total() == 0


def test_confusion_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        evalcli.confusion(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)


def test_confusion_matches_pixel_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        pred = rng.integers(0, 5, size=(10, 7))
        gt = rng.integers(0, 5, size=(10, 7))
        gt[rng.random(gt.shape) < 0.15] = 255
        cm = evalcli.confusion(pred, gt, 5)
        np.testing.assert_array_equal(cm.counts, confusion_pixel_loop(pred, gt, 5))


def test_miou_perfect_prediction():
    gt = np.random.default_rng(2).integers(0, 3, size=(6, 6))
    report = evalcli.miou(evalcli.confusion(gt, gt, 3))
    assert report.miou == 1.0
    assert report.pixel_accuracy == 1.0
    assert all(report.iou[c] == 1.0 for c in range(3) if report.present[c])


def test_miou_worked_example_seven_twelfths():
    pred = np.array([0, 0, 1, 1])
    gt = np.array([0, 1, 1, 1])
    report = evalcli.miou(evalcli.confusion(pred, gt, 2))
    assert abs(report.iou[0] - 0.5) < 1e-12
    assert abs(report.iou[1] - 2 / 3) < 1e-12
    assert abs(report.miou - 7 / 12) < 1e-12


def test_miou_excludes_absent_classes():
    pred = np.array([0, 0, 1, 1])
    gt = np.array([0, 0, 1, 1])
    report = evalcli.miou(evalcli.confusion(pred, gt, 4))
    assert report.present.tolist() == [True, True, False, False]
    assert np.isnan(report.iou[2]) and np.isnan(report.iou[3])
    assert report.miou == 1.0


def test_miou_matches_set_oracle_on_random_maps():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pred = rng.integers(0, 4, size=(12, 12))
        gt = rng.integers(0, 4, size=(12, 12))
        gt[rng.random(gt.shape) < 0.1] = 255
        report = evalcli.miou(evalcli.confusion(pred, gt, 4))
        ref_ious, ref_mean = miou_from_sets(pred, gt, 4)
        for c, iou in ref_ious.items():
            assert abs(report.iou[c] - iou) < 1e-12
        assert abs(report.miou - ref_mean) < 1e-12


def test_disc_accuracy_tie_rule_and_separation():
    half = np.full((1, 1, 2, 2), 0.5)
    assert evalcli.disc_accuracy_from_probs(half, half) == 0.5
    hi = np.full((1, 1, 2, 2), 0.9)
    lo = np.full((1, 1, 2, 2), 0.1)
    assert evalcli.disc_accuracy_from_probs(hi, lo) == 1.0
    assert evalcli.disc_accuracy_from_probs(lo, hi) == 0.0


def test_disc_accuracy_zero_init_is_half(tmp_path):
    emit_dataset(2, "source", tmp_path / "d", seed=4, height=32, width=32)
    ds = SceneDataset(tmp_path / "d", "train")
    cfg = trainer.TrainConfig(dtype="float32", seed=0)
    seg = trainer.build_segmenter(ds.classes, cfg)
    gdisc = GlobalDiscriminator(seg.config.feature_dim, dtype=seg.dtype)
    acc = evalcli.disc_accuracy(seg, gdisc, [ds.image(0)], [ds.image(1)])
    assert acc == 0.5


@pytest.fixture(scope="module")
def labeled_city(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalcity")
    emit_dataset(3, "source", root, eval_count=2, seed=5, height=32, width=32)
    return root


def test_evaluate_does_not_mutate_model(labeled_city):
    ds = SceneDataset(labeled_city, "eval")
    cfg = trainer.TrainConfig(dtype="float64", seed=1)
    seg = trainer.build_segmenter(ds.classes, cfg)
    before = {n: t.data.copy() for n, t in seg.params.items()}
    report = evalcli.evaluate_segmenter(seg, ds)
    assert report.samples == 2
    for n, t in seg.params.items():
        np.testing.assert_array_equal(t.data, before[n])


def test_export_embeddings_records_and_pooling_oracle(labeled_city, tmp_path):
    ds = SceneDataset(labeled_city, "eval")
    cfg = trainer.TrainConfig(dtype="float64", seed=2)
    seg = trainer.build_segmenter(ds.classes, cfg)
    out = tmp_path / "emb.txt"
    n = evalcli.export_embeddings(seg, ds, out, domain="target")
    lines = out.read_text().strip().splitlines()
    assert len(lines) == n

    # oracle: per-image per-class mean over majority-labeled grid cells
    import gridadapt.numkit as nk
    from gridadapt.cityforge import images_to_batch

    expected = []
    for i in range(len(ds)):
        feats = seg.extract_features(
            nk.Tensor(images_to_batch([ds.image(i)], seg.dtype))).data[0]
        lab = ds.label(i)
        d = seg.geometry.factor
        hf, wf = lab.shape[0] // d, lab.shape[1] // d
        for c in range(len(ds.classes)):
            cells = []
            for r in range(hf):
                for q in range(wf):
                    block = lab[r * d : (r + 1) * d, q * d : (q + 1) * d]
                    counts = [(block == k).sum() for k in range(len(ds.classes))]
                    if int(np.argmax(counts)) == c and counts[c] > 0:
                        cells.append(feats[:, r, q])
            if cells:
                expected.append((c, np.mean(cells, axis=0)))

    assert len(expected) == len(lines)
    for line, (c, vec) in zip(lines, expected):
        parts = line.split()
        assert parts[0] == "target"
        assert int(parts[1]) == c
        got = np.array([float(v) for v in parts[2:]])
        assert got.shape == (seg.config.feature_dim,)
        np.testing.assert_allclose(got, vec, atol=1e-5)


def test_single_class_image_gives_single_record(tmp_path):
    import gridadapt.numkit as nk

    class OneClass:
        classes = ("a", "b", "c")

        def __len__(self):
            return 1

        def image(self, i):
            return np.full((16, 16, 3), 100, np.uint8)

        def label(self, i):
            return np.zeros((16, 16), np.uint8)

    cfg = trainer.TrainConfig(dtype="float64", seed=3)
    from gridadapt.segmenter import Segmenter, SegmenterConfig
    seg = Segmenter(SegmenterConfig(classes=OneClass.classes), rng=np.random.default_rng(0))
    out = tmp_path / "one.txt"
    n = evalcli.export_embeddings(seg, OneClass(), out, domain="source")
    assert n == 1
    line = out.read_text().strip()
    assert line.startswith("source 0 ")


def test_write_report_format(tmp_path, labeled_city):
    ds = SceneDataset(labeled_city, "eval")
    cfg = trainer.TrainConfig(dtype="float32", seed=4)
    seg = trainer.build_segmenter(ds.classes, cfg)
    report = evalcli.evaluate_segmenter(seg, ds)
    path = tmp_path / "report.txt"
    evalcli.write_report(report, ds.classes, path)
    lines = path.read_text().strip().splitlines()
    assert lines[-1].startswith("miou=")
    for line in lines[:-1]:
        assert line.startswith("class=") and " iou=" in line
