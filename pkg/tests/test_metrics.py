# -*- coding: utf-8 -*-
import numpy as np
import pytest

from depthCore.metrics import (
    METRIC_COLUMNS,
    DepthMetrics,
    EvalConfig,
    baseline_scale,
    compute_metrics,
    eigen_crop_mask,
    evaluate,
    median_scale,
    metrics_table,
    summary_frame,
    valid_mask,
)

PRED = np.array([[1.0, 2.0], [3.0, 4.0]])
GT = np.array([[1.0, 1.0], [3.0, 5.0]])


def test_hand_computed_two_by_two_case():
    m = compute_metrics(PRED, GT)
    assert m.abs_rel == pytest.approx(0.3)
    assert m.delta1 == 0.5
    assert m.sq_rel == pytest.approx((1.0 + 0.2) / 4)
    assert m.rmse == pytest.approx(np.sqrt(2.0 / 4))
    assert m.delta2 == 0.75 and m.delta3 == 0.75


def test_perfect_prediction_gives_zero_error_row(rng):
    gt = rng.uniform(1.0, 50.0, size=(6, 8))
    row = compute_metrics(gt.copy(), gt).to_row()
    assert list(row) == METRIC_COLUMNS
    assert row["abs_rel"] == 0.0 and row["rmse"] == 0.0 and row["rmse_log"] == 0.0
    assert row["d1"] == 1.0


def test_median_scaling_removes_global_scale(rng):
    gt = rng.uniform(1.0, 50.0, size=(6, 8))
    pred = gt * rng.uniform(0.9, 1.1, size=gt.shape)
    a = evaluate(pred, gt)
    b = evaluate(pred * 17.0, gt)
    assert b.abs_rel == pytest.approx(a.abs_rel, rel=1e-9)
    assert evaluate(pred * 17.0, gt, scaling="none").abs_rel > a.abs_rel


def test_median_scale_factor():
    pred = np.array([1.0, 2.0, 3.0])
    gt = np.array([2.0, 4.0, 6.0])
    escalada, escala = median_scale(pred, gt, np.ones(3, dtype=bool))
    assert escala == pytest.approx(2.0)
    np.testing.assert_allclose(escalada, gt)
    with pytest.raises(ValueError):
        median_scale(pred, gt, np.zeros(3, dtype=bool))


def test_baseline_scale_and_evaluate_with_factor():
    np.testing.assert_allclose(baseline_scale(np.array([1.0, 2.0]), 5.0), [5.0, 10.0])
    with pytest.raises(ValueError):
        baseline_scale(np.ones(2), 0.0)
    m = evaluate(GT / 2.0, GT, scaling="baseline", factor=2.0)
    assert m.abs_rel == pytest.approx(0.0)


def test_valid_mask_excludes_cap_and_floor():
    gt = np.array([0.0, 0.5, 79.0, 80.0, 120.0])
    np.testing.assert_array_equal(valid_mask(gt), [False, True, True, False, False])


def test_prediction_is_clipped_to_cap():
    gt = np.array([10.0, 10.0])
    m = compute_metrics(np.array([10.0, 1e6]), gt)
    assert m.abs_rel == pytest.approx((80.0 - 10.0) / 10.0 / 2)


def test_empty_valid_set_raises():
    with pytest.raises(ValueError):
        compute_metrics(np.ones((2, 2)), np.full((2, 2), 100.0))
    with pytest.raises(ValueError):
        compute_metrics(np.ones((2, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        evaluate(PRED, GT, scaling="mean")


def test_delta_ordering_is_validated():
    with pytest.raises(ValueError):
        DepthMetrics(0.1, 0.1, 1.0, 0.1, 0.9, 0.5, 1.0)
    with pytest.raises(ValueError):
        DepthMetrics(float("nan"), 0.1, 1.0, 0.1, 0.5, 0.6, 1.0)


def test_mean_of_metrics():
    a = DepthMetrics(0.1, 0.2, 1.0, 0.1, 0.5, 0.6, 0.7)
    b = DepthMetrics(0.3, 0.4, 3.0, 0.3, 0.7, 0.8, 0.9)
    m = DepthMetrics.mean([a, b])
    assert m.abs_rel == pytest.approx(0.2) and m.delta3 == pytest.approx(0.8)
    with pytest.raises(ValueError):
        DepthMetrics.mean([])


def test_crop_mask_covers_lower_central_region():
    m = eigen_crop_mask(64, 192)
    assert not m[:26].any()
    assert m[40, 96]
    assert not m[:, :6].any()


def test_eval_config_applies_crop():
    gt = np.full((64, 192), 10.0)
    pred = gt.copy()
    pred[:10] = 40.0
    assert EvalConfig(scaling="none").evaluate(pred, gt).abs_rel > 0
    assert EvalConfig(scaling="none", crop=True).evaluate(pred, gt).abs_rel == 0.0
    with pytest.raises(ValueError):
        EvalConfig(scaling="max")
    with pytest.raises(ValueError):
        EvalConfig(cap=1.0, floor=2.0)


def test_metrics_table_has_mean_row():
    a = compute_metrics(PRED, GT)
    tabla = metrics_table([(0, a), (1, a)])
    assert list(tabla.columns) == ["frame"] + METRIC_COLUMNS
    assert tabla.iloc[-1]["frame"] == "mean"
    assert tabla.iloc[-1]["abs_rel"] == pytest.approx(0.3)
    assert list(summary_frame(a).columns) == METRIC_COLUMNS
