import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recurrent_octomap.errors import ArgumentError, UndefinedMetricError
from recurrent_octomap.metrics import (ConfusionMatrix, MetricsRow, accumulate, mean_accuracy, mean_iou,
                                       mean_row, overall_accuracy, read_metrics_csv, write_metrics_csv,
                                       write_metrics_json)
from recurrent_octomap.voxel_map import GroundTruthMap

from oracles import exact_metrics, naive_confusion


def _cm(rows):
    return ConfusionMatrix(len(rows), np.array(rows))


def test_hand_worked_example():
    cm = _cm([[8, 2], [1, 9]])
    assert overall_accuracy(cm) == 17 / 20
    assert mean_accuracy(cm) == pytest.approx((0.8 + 0.9) / 2, abs=1e-15)
    assert mean_iou(cm) == pytest.approx((8 / 11 + 9 / 12) / 2, abs=1e-15)


@pytest.mark.parametrize("n", [1, 2, 4])
def test_diagonal_matrix_scores_exactly_one(n):
    cm = ConfusionMatrix(n, np.diag(np.arange(1, n + 1) * 7))
    assert overall_accuracy(cm) == 1.0 and mean_accuracy(cm) == 1.0 and mean_iou(cm) == 1.0


def test_zero_support_class_is_excluded():
    # cyclists absent from the ground truth that day; a stray cyclist prediction still costs IoU elsewhere
    cm = _cm([[5, 0, 0, 1], [0, 4, 0, 0], [0, 0, 3, 0], [0, 0, 0, 0]])
    assert mean_accuracy(cm) == pytest.approx((5 / 6 + 1 + 1) / 3, abs=1e-15)
    assert mean_iou(cm) == pytest.approx((5 / 6 + 1 + 1) / 3, abs=1e-15)


def test_empty_matrix_is_undefined():
    with pytest.raises(UndefinedMetricError):
        overall_accuracy(ConfusionMatrix(4))


def test_negative_counts_rejected():
    with pytest.raises(ArgumentError):
        _cm([[1, -1], [0, 1]])


def test_100_random_matrices_match_exact_rationals():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 6))
        counts = rng.integers(0, 1000, size=(n, n)) * (rng.random((n, n)) < 0.8)
        if rng.random() < 0.3:
            counts[int(rng.integers(n))] = 0
        if counts.sum() == 0:
            counts[0, 0] = 1
        cm = ConfusionMatrix(n, counts)
        exact = exact_metrics(counts.tolist())
        got = (overall_accuracy(cm), mean_accuracy(cm), mean_iou(cm))
        for g, e in zip(got, exact):
            assert abs(g - float(e)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_relabeling_classes_does_not_change_scores(seed):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 50, size=(4, 4))
    counts[0, 0] += 1
    perm = rng.permutation(4)
    a = ConfusionMatrix(4, counts).scores()
    b = ConfusionMatrix(4, counts[np.ix_(perm, perm)]).scores()
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_iou_never_exceeds_recall(seed):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 30, size=(4, 4))
    counts[1, 1] += 1
    cm = ConfusionMatrix(4, counts)
    s = cm.scores()
    assert 0.0 <= s["mean_iou"] <= s["mean_accuracy"] + 1e-15 <= 1.0 + 1e-15
    assert 0.0 <= s["overall_accuracy"] <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_confusion_counts_add_across_days(seed):
    rng = np.random.default_rng(seed)
    a = ConfusionMatrix(4, rng.integers(0, 9, size=(4, 4)))
    b = ConfusionMatrix(4, rng.integers(0, 9, size=(4, 4)))
    np.testing.assert_array_equal((a + b).counts, a.counts + b.counts)


def _random_gt_and_pred(rng, n=300):
    keys = np.unique(rng.integers(-6, 6, size=(n, 3)), axis=0)
    labels = rng.integers(0, 5, size=len(keys))
    gt = GroundTruthMap(0.4, keys, labels, day=0)
    mask = rng.random(len(keys)) < 0.8
    extra = rng.integers(20, 30, size=(10, 3))
    pred_keys = np.vstack([keys[mask], extra])
    pred_probs = rng.dirichlet(np.ones(4), size=len(pred_keys))
    perm = rng.permutation(len(pred_keys))
    return gt, pred_keys[perm], pred_probs[perm]


@pytest.mark.parametrize("seed", range(10))
def test_accumulate_matches_naive_confusion(seed):
    rng = np.random.default_rng(seed)
    gt, pk, pp = _random_gt_and_pred(rng)
    cm = accumulate(ConfusionMatrix(4), pk, pp, gt, 0.4)
    pred = {tuple(k): list(p) for k, p in zip(pk.tolist(), pp)}
    naive = naive_confusion(pred, gt.as_dict(), 4, 4)
    np.testing.assert_array_equal(cm.counts, naive)


def test_unpredicted_cells_count_as_background_and_dont_care_is_skipped():
    gt = GroundTruthMap(0.4, np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([1, 4, 2]), day=0)
    cm = accumulate(ConfusionMatrix(4), np.array([[2, 0, 0]]), np.array([[0.1, 0.1, 0.7, 0.1]]), gt)
    assert cm.counts[1, 0] == 1 and cm.counts[2, 2] == 1 and cm.counts.sum() == 2


def test_resolution_mismatch_is_rejected():
    gt = GroundTruthMap(0.4, np.zeros((1, 3), np.int64), np.array([0]), day=0)
    with pytest.raises(ArgumentError):
        accumulate(ConfusionMatrix(4), np.zeros((0, 3)), np.zeros((0, 4)), gt, resolution=0.2)


def test_mean_row_averages_days():
    rows = [MetricsRow(d, "bayes", "-", None, {"overall_accuracy": v, "mean_accuracy": v, "mean_iou": v})
            for d, v in enumerate([0.2, 0.4])]
    assert mean_row(rows, "bayes", "-").scores["mean_iou"] == pytest.approx(0.3)


def test_csv_and_json_outputs(tmp_path):
    cm = _cm([[3, 1, 0, 0], [0, 2, 0, 0], [0, 0, 1, 0], [0, 0, 0, 0]])
    row = MetricsRow(8, "naplstm", "day", cm, cm.scores())
    write_metrics_csv(tmp_path / "m.csv", [row])
    back = read_metrics_csv(tmp_path / "m.csv")
    assert back[0]["backend"] == "naplstm" and back[0]["mntd"] == "day"
    assert float(back[0]["overall_accuracy"]) == pytest.approx(6 / 7, abs=1e-6)
    write_metrics_json(tmp_path / "m.json", [row])
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc[0]["confusion"] == cm.counts.tolist()
