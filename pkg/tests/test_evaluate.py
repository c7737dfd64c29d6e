import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gleseg.dataset import LoadedSplit
from gleseg.evaluate import (EvalRecord, ModelBundle, dice, evaluate_run, iou, pixel_accuracy, quality_score,
                             read_records, summarize, to_gray, write_report)
from gleseg.seg_model import SegModel


def brute(pred, gt):
    tp = fp = fn = tn = 0
    for i, j in itertools.product(range(pred.shape[0]), range(pred.shape[1])):
        p, g = bool(pred[i, j]), bool(gt[i, j])
        tp += p and g
        fp += p and not g
        fn += g and not p
        tn += not p and not g
    u = tp + fp + fn
    return (tp / u if u else 1.0), (2 * tp / (2 * tp + fp + fn) if u else 1.0), (tp + tn) / (tp + fp + fn + tn)


def test_hand_case():
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[1, 0], [1, 0]])
    assert iou(pred, gt) == pytest.approx(1 / 3)
    assert dice(pred, gt) == pytest.approx(0.5)
    assert pixel_accuracy(pred, gt) == pytest.approx(0.5)


def test_empty_conventions():
    z = np.zeros((3, 3))
    assert iou(z, z) == dice(z, z) == pixel_accuracy(z, z) == 1.0
    one = z.copy()
    one[0, 0] = 1
    assert iou(one, z) == 0.0 and dice(one, z) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))


def random_pairs(n=100, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        h, w = rng.integers(1, 20, size=2)
        p = rng.random()
        yield (rng.random((h, w)) < p).astype(np.uint8), (rng.random((h, w)) < rng.random()).astype(np.uint8)


def test_metrics_match_enumeration():
    for pred, gt in random_pairs():
        bi, bd, bp = brute(pred, gt)
        assert abs(iou(pred, gt) - bi) < 1e-9
        assert abs(dice(pred, gt) - bd) < 1e-9
        assert abs(pixel_accuracy(pred, gt) - bp) < 1e-9


def test_dice_iou_identity():
    for pred, gt in random_pairs(seed=1):
        j = iou(pred, gt)
        assert abs(dice(pred, gt) - 2 * j / (1 + j)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_metric_symmetry_and_range(seed):
    pred, gt = next(random_pairs(1, seed))
    for f in (iou, dice, pixel_accuracy):
        assert f(pred, gt) == f(gt, pred)
        assert 0.0 <= f(pred, gt) <= 1.0


def test_quality_delta_oracle():
    # reflect-101 Laplacian of a centred delta: -4 at the centre, 2 on the edge midpoints, 0 in corners
    img = np.zeros((3, 3))
    img[1, 1] = 1.0
    assert quality_score(img) == pytest.approx(272 / 81, abs=1e-12)


def test_quality_uses_luma():
    rgb = np.random.default_rng(0).random((8, 8, 3))
    assert quality_score(rgb) == pytest.approx(quality_score(to_gray(rgb)))
    assert to_gray(np.ones((1, 1, 3)))[0, 0] == pytest.approx(1.0)


def test_quality_orders_blur():
    import cv2
    board = np.indices((32, 32)).sum(0) % 2 * 1.0
    blurred = cv2.GaussianBlur(board, (5, 5), 1.0)
    assert quality_score(board) > quality_score(blurred)
    assert quality_score(np.full((8, 8), 0.3)) == 0.0


def tiny_split(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    hq = rng.random((n, size, size, 3))
    masks = np.zeros((n, size, size), dtype=np.uint8)
    masks[:, 4:12, 4:12] = 1
    lq = {lv: np.clip(hq + 0.1 * rng.standard_normal(hq.shape), 0, 1) for lv in ("LQ1", "LQ2", "LQ3")}
    return LoadedSplit([f"s{i}" for i in range(n)], hq, lq, masks)


@pytest.fixture(scope="module")
def seg():
    torch.manual_seed(0)
    return SegModel(16, 32).eval()


def test_identity_enhancer_matches_baseline(seg):
    data = tiny_split()
    recs, summary = evaluate_run(ModelBundle(seg, lambda z: z), data)
    assert summary["gle"] == summary["baseline"]
    assert len(recs) == 2 * 4 * len(data.ids)


def test_enhancer_toggle_changes_gle_arm_only(seg):
    data = tiny_split()
    _, base = evaluate_run(ModelBundle(seg, None), data)
    _, flip = evaluate_run(ModelBundle(seg, lambda z: -z), data)
    assert flip["baseline"] == base["baseline"]
    assert base["gle"] == base["baseline"]


def test_report_round_trip(seg, tmp_path):
    recs, summary = evaluate_run(ModelBundle(seg, lambda z: 0.5 * z), tiny_split(), levels=("clear", "LQ3"))
    write_report(tmp_path, recs, summary)
    for name in ("summary.json", "records.csv", "density.csv", "summary.md", "density.png"):
        assert (tmp_path / name).exists()
    back = read_records(tmp_path / "records.csv")
    assert back == recs
    assert summarize(back) == summary
    assert "LQ3 IoU" in (tmp_path / "summary.md").read_text()


def test_summary_means():
    recs = [EvalRecord("a", "gle", "LQ1", "points", 1.0, 1.0, 1.0, 2.0),
            EvalRecord("b", "gle", "LQ1", "points", 0.0, 0.0, 0.5, 4.0)]
    s = summarize(recs)["gle"]["LQ1"]
    assert s == {"n": 2, "iou": 0.5, "dice": 0.5, "pa": 0.75, "quality": 3.0}
