import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from atdt.metrics import (
    ConfusionMatrix,
    DepthAccumulator,
    accumulate,
    depth_metrics,
    seg_metrics,
)
from atdt.oracles import depth_metrics_bruteforce, seg_metrics_bruteforce, seg_metrics_from_counts
from atdt.tensor import ContractError

TOL = 1e-12


@st.composite
def label_pairs(draw):
    k = draw(st.integers(2, 7))
    shape = draw(st.tuples(st.integers(1, 6), st.integers(1, 6)))
    gt = draw(hnp.arrays(np.int64, shape, elements=st.integers(0, k - 1)))
    pred = draw(hnp.arrays(np.int64, shape, elements=st.integers(0, k - 1)))
    ignore = draw(hnp.arrays(np.bool_, shape))
    return k, pred, gt, ignore


@st.composite
def depth_pairs(draw):
    n = draw(st.integers(1, 30))
    gt = draw(hnp.arrays(np.float64, n, elements=st.floats(1.0, 100.0)))
    pred = draw(hnp.arrays(np.float64, n, elements=st.floats(-5.0, 150.0)))
    valid = draw(hnp.arrays(np.bool_, n))
    return pred, gt, valid


# -------------------------------------------------------------- segmentation
def test_hand_confusion_matrix():
    # IoU_0 = 3 / (3 + 1 + 2) = 0.5, IoU_1 = 4 / (4 + 2 + 1) = 4/7
    m = seg_metrics(ConfusionMatrix(2, np.array([[3, 1], [2, 4]])))
    assert m.miou == pytest.approx((0.5 + 4 / 7) / 2, abs=TOL)
    assert round(m.miou, 4) == 0.5357
    assert m.acc == pytest.approx(0.7, abs=TOL)


def test_absent_class_excluded_from_mean():
    cm = accumulate(ConfusionMatrix(3), np.array([0, 1, 2, 2]), np.array([0, 1, 1, 1]))
    m = seg_metrics(cm)
    assert m.per_class_iou[2] is None
    assert m.miou == pytest.approx((1.0 + 1 / 3) / 2, abs=TOL)


def test_perfect_prediction():
    gt = np.random.default_rng(0).integers(0, 6, size=(4, 8, 8))
    m = seg_metrics(accumulate(ConfusionMatrix(6), gt, gt))
    assert m.miou == 1.0 and m.acc == 1.0


def test_out_of_range_label_rejected():
    with pytest.raises(ContractError):
        accumulate(ConfusionMatrix(3), np.array([0, 3]), np.array([0, 1]))
    with pytest.raises(ContractError):
        accumulate(ConfusionMatrix(3), np.array([0, 1]), np.array([-1, 1]))


def test_empty_matrix_rejected():
    with pytest.raises(ContractError):
        seg_metrics(ConfusionMatrix(3))


@settings(max_examples=150, deadline=None)
@given(label_pairs())
def test_seg_matches_bruteforce(case):
    k, pred, gt, ignore = case
    if ignore.all():
        ignore.flat[0] = False
    m = seg_metrics(accumulate(ConfusionMatrix(k), pred, gt, ignore))
    miou, acc, per_class = seg_metrics_bruteforce(pred, gt, k, ignore)
    assert abs(m.miou - miou) <= TOL
    assert abs(m.acc - acc) <= TOL
    for a, b in zip(m.per_class_iou, per_class):
        assert (a is None) == (b is None)
        if a is not None:
            assert abs(a - b) <= TOL


@settings(max_examples=100, deadline=None)
@given(label_pairs(), st.integers(1, 5))
def test_confusion_merge_equals_single_pass(case, parts):
    k, pred, gt, _ = case
    whole = accumulate(ConfusionMatrix(k), pred, gt)
    cuts = np.array_split(np.arange(pred.size), parts)
    merged = ConfusionMatrix(k)
    for idx in cuts:
        merged = merged + accumulate(ConfusionMatrix(k), pred.ravel()[idx], gt.ravel()[idx])
    np.testing.assert_array_equal(merged.counts, whole.counts)
    assert merged.total == pred.size


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.int64, (3, 3), elements=st.integers(0, 20)))
def test_metrics_from_counts(counts):
    if counts.sum(axis=1).max() == 0:
        counts[0, 0] = 1
    m = seg_metrics(ConfusionMatrix(3, counts))
    miou, acc = seg_metrics_from_counts(counts.tolist())
    assert abs(m.miou - miou) <= TOL and abs(m.acc - acc) <= TOL
    assert 0.0 <= m.miou <= 1.0


# --------------------------------------------------------------------- depth
def test_exact_prediction():
    gt = np.random.default_rng(0).uniform(1, 100, size=(2, 1, 4, 4))
    d = depth_metrics(gt, gt)
    assert d.abs_rel == 0 and d.rmse == 0 and d.delta1 == 1.0


def test_delta_boundary_is_strict():
    gt = np.array([1.0, 2.0, 4.0, 8.0])
    d = depth_metrics(1.25 * gt, gt)
    assert d.delta1 == 0.0
    assert d.delta2 == 1.0 and d.delta3 == 1.0
    assert d.abs_rel == pytest.approx(0.25, abs=TOL)


def test_prediction_is_clamped():
    gt = np.array([1.0, 100.0])
    d = depth_metrics(np.array([-3.0, 1e6]), gt)
    assert d.abs_rel == 0.0


def test_invalid_pixels_ignored():
    gt = np.array([10.0, 10.0])
    d = depth_metrics(np.array([10.0, 50.0]), gt, np.array([1, 0]))
    assert d.abs_rel == 0.0


def test_no_valid_pixels_rejected():
    with pytest.raises(ContractError):
        depth_metrics(np.ones(3), np.ones(3), np.zeros(3))


@settings(max_examples=150, deadline=None)
@given(depth_pairs())
def test_depth_matches_bruteforce(case):
    pred, gt, valid = case
    if not valid.any():
        valid[0] = True
    got = depth_metrics(pred, gt, valid).to_dict()
    ref = depth_metrics_bruteforce(pred, gt, valid)
    for key, v in ref.items():
        assert abs(got[key] - v) <= TOL * max(1.0, abs(v)), key


@settings(max_examples=100, deadline=None)
@given(depth_pairs(), st.integers(1, 6))
def test_streaming_equals_single_shot(case, parts):
    pred, gt, valid = case
    valid[0] = True
    acc = DepthAccumulator()
    for idx in np.array_split(np.arange(len(gt)), parts):
        acc.update(pred[idx], gt[idx], valid[idx])
    assert acc.result() == depth_metrics(pred, gt, valid)


@settings(max_examples=100, deadline=None)
@given(depth_pairs())
def test_depth_metric_ranges(case):
    pred, gt, valid = case
    valid[0] = True
    d = depth_metrics(pred, gt, valid)
    assert d.abs_rel >= 0 and d.sq_rel >= 0 and d.rmse >= 0 and d.rmse_log >= 0
    assert 0 <= d.delta1 <= d.delta2 <= d.delta3 <= 1
    assert math.isfinite(d.rmse_log)
