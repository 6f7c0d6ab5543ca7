import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from noisyseg.metrics import (
    METRIC_KEYS,
    ConfusionCounts,
    InstanceSet,
    average_precision,
    confusion,
    dice,
    evaluate_run,
    extract_instances,
    instances_from_mask,
    iou,
    precision,
    recall,
)

from .oracles import metric_fixture, metric_oracle

# hand-worked from the fixture's docstring
FIXTURE_TABLE = {
    "ap50": 29 / 60,
    "ap75": 9 / 40,
    "iou": 2 / 3,
    "recall": 3 / 4,
    "precision": 3 / 5,
    "dice": 10 / 13,
}


def test_confusion_example():
    pred = np.array([1, 1, 1, 0, 0])
    gt = np.array([1, 1, 0, 1, 0])
    c = confusion(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 1)
    assert dice(c) == pytest.approx(4 / 6)
    assert precision(c) == pytest.approx(2 / 3)
    assert recall(c) == pytest.approx(2 / 3)
    assert iou(c) == 0.5


def test_confusion_identity_and_empty():
    gt = np.array([[0, 1], [1, 1]])
    c = confusion(gt, gt)
    assert c.fp == c.fn == 0
    c = confusion(np.zeros_like(gt), gt)
    assert c.fn == 3 and c.tp == 0
    with pytest.raises(ValueError):
        confusion(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


def test_conventions():
    empty = ConfusionCounts(0, 0, 0, 9)
    assert dice(empty) == 1.0 and iou(empty) == 1.0
    assert precision(empty) == 0.0 and recall(empty) == 0.0
    disjoint = confusion(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1]))
    assert dice(disjoint) == 0.0 and iou(disjoint) == 0.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (5, 5), elements=st.integers(0, 1)), arrays(np.uint8, (5, 5), elements=st.integers(0, 1)))
def test_dice_iou_identity(a, b):
    c = confusion(a, b)
    j = iou(c)
    assert dice(c) == pytest.approx(2 * j / (1 + j), abs=1e-12)
    assert dice(c) >= j - 1e-12
    for f in (dice, iou, precision, recall):
        assert 0.0 <= f(c) <= 1.0


def test_extract_instances():
    prob = np.zeros((6, 6))
    prob[0:2, 0:2] = 0.9
    prob[4, 4] = 0.6
    inst = extract_instances(prob)
    assert len(inst) == 2
    np.testing.assert_allclose(inst.confidences, [0.9, 0.6])
    assert len(extract_instances(np.zeros((4, 4)))) == 0
    with pytest.raises(ValueError):
        extract_instances(prob, 1.0)


def test_diagonal_pixels_merge():
    prob = np.zeros((4, 4))
    prob[0, 0] = prob[1, 1] = prob[2, 2] = 0.8
    assert len(extract_instances(prob)) == 1


def _single(prob, gt):
    return [extract_instances(prob)], [instances_from_mask(gt)]


def test_ap_iou_point_six():
    # 6 predicted pixels inside a 10-pixel lesion: IoU 0.6
    gt = np.ones((1, 10))
    prob = np.zeros((1, 10))
    prob[0, 0:6] = 0.9
    preds, gts = _single(prob, gt)
    assert average_precision(preds, gts, 0.5) == 1.0
    assert average_precision(preds, gts, 0.75) == 0.0


def test_ap_edge_cases():
    gt = np.zeros((4, 4))
    gt[1, 1] = 1
    preds, gts = _single(np.zeros((4, 4)), gt)
    assert average_precision(preds, gts, 0.5) == 0.0
    preds, gts = _single(gt * 0.9, gt)
    assert average_precision(preds, gts, 0.5) == 1.0
    assert average_precision(preds, gts, 0.75) == 1.0
    with pytest.raises(ValueError):
        average_precision(preds, gts, 0.0)
    with pytest.raises(ValueError):
        average_precision(preds, gts + gts, 0.5)


def test_ap_invariant_under_monotone_transform():
    preds_v, gts_v = metric_fixture()
    preds = [extract_instances(p) for v in sorted(preds_v) for p in preds_v[v]]
    gts = [instances_from_mask(g) for v in sorted(gts_v) for g in gts_v[v]]
    moved = [InstanceSet(p.labels, np.sqrt(p.confidences) * 0.3 + 0.1) for p in preds]
    for tau in (0.5, 0.75):
        assert average_precision(moved, gts, tau) == average_precision(preds, gts, tau)


def test_ap_permutation_invariant_over_images():
    preds_v, gts_v = metric_fixture()
    preds = [extract_instances(p) for v in sorted(preds_v) for p in preds_v[v]]
    gts = [instances_from_mask(g) for v in sorted(gts_v) for g in gts_v[v]]
    order = [2, 0, 3, 1]
    ref = average_precision(preds, gts, 0.5)
    assert average_precision([preds[i] for i in order], [gts[i] for i in order], 0.5) == pytest.approx(ref, abs=1e-15)


def test_fixture_matches_hand_table():
    preds, gts = metric_fixture()
    report = evaluate_run(preds, gts)
    for key, value in FIXTURE_TABLE.items():
        assert report["aggregate"][key] == pytest.approx(value, abs=1e-12), key


def test_fixture_matches_scripted_oracle():
    preds, gts = metric_fixture()
    assert evaluate_run(preds, gts)["aggregate"] == metric_oracle(preds, gts)


def test_random_corpus_matches_oracle():
    rng = np.random.default_rng(7)
    preds, gts = {}, {}
    for v in range(3):
        gt = np.zeros((3, 16, 16), np.uint8)
        for _ in range(4):
            s, y, x = rng.integers(0, 3), rng.integers(0, 12), rng.integers(0, 12)
            gt[s, y:y + rng.integers(1, 5), x:x + rng.integers(1, 5)] = 1
        noise = rng.uniform(0, 0.6, size=gt.shape)
        preds[f"v{v}"] = np.clip(0.55 * gt + noise * (rng.uniform(size=gt.shape) < 0.5), 0, 1)
        gts[f"v{v}"] = gt
    report = evaluate_run(preds, gts)["aggregate"]
    assert report == metric_oracle(preds, gts)
    assert report["ap75"] <= report["ap50"]


def test_perfect_predictions():
    _, gts = metric_fixture()
    report = evaluate_run({k: v.astype(float) for k, v in gts.items()}, gts)
    assert all(report["aggregate"][k] == 1.0 for k in METRIC_KEYS)


def test_report_schema_and_json_roundtrip(tmp_path):
    preds, gts = metric_fixture()
    report = evaluate_run(preds, gts, config={"row": "x"})
    assert set(report["aggregate"]) == set(METRIC_KEYS)
    assert [v["id"] for v in report["per_volume"]] == ["a", "b"]
    assert report["counts"] == {"n_gt": 4, "n_pred": 5, "n_tp": 3}
    path = tmp_path / "r.json"
    path.write_text(json.dumps(report))
    assert json.loads(path.read_text()) == report


def test_id_mismatch():
    preds, gts = metric_fixture()
    with pytest.raises(ValueError):
        evaluate_run({"a": preds["a"]}, gts)
