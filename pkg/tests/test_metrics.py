import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvanet.geometry import DepthMap, DisparityMap, StereoCalibration, disparity_to_depth
from dvanet.metrics import (
    BinnedErrorCurve,
    MetricError,
    MetricReport,
    WrdeConfig,
    bin_errors,
    compare_models,
    d1_rate,
    epe,
    evaluate_disparity,
    pixel_error_rate,
    relative_depth_error,
    relative_depth_error_from_depth,
    segment_means,
    wrde,
    wrde_weights,
)


def curve_of(errors, z0=0.0, dz=1.0):
    e = np.asarray(errors, dtype=np.float64)
    counts = np.where(np.isnan(e), 0, 1)
    return BinnedErrorCurve(z0 + dz * (np.arange(len(e)) + 0.5), e, counts)


def cfg_n(n):
    return WrdeConfig(0.0, float(n), 1.0)


def test_epe_examples():
    gt = np.array([[5.0, 7.0]])
    assert epe(gt, gt) == 0.0
    assert epe(gt + 1.0, gt) == 1.0
    assert epe(np.array([[5.0, 10.0]]), gt) == 1.5


def test_pixel_error_rate_strict():
    gt = np.full((1, 3), 10.0)
    assert pixel_error_rate(gt, gt, 1.0) == 0.0
    assert pixel_error_rate(gt + 1.0, gt, 1.0) == 0.0
    assert pixel_error_rate(gt + np.array([[0.5, 1.5, 2.5]]), gt, 1.0) == pytest.approx(2 / 3)


def test_d1_conjunction():
    assert d1_rate(np.array([[104.0]]), np.array([[100.0]])) == 0.0
    assert d1_rate(np.array([[14.0]]), np.array([[10.0]])) == 1.0
    assert d1_rate(np.array([[10.0]]), np.array([[10.0]])) == 0.0


def test_metrics_skip_invalid_gt():
    gt = DisparityMap(np.array([[10.0, 0.0]]), np.array([[True, False]]))
    assert epe(np.array([[10.0, 99.0]]), gt) == 0.0


def test_relative_depth_error_examples():
    err, m = relative_depth_error(np.array([[22.0, 10.0, 5.0]]), np.array([[20.0, 10.0, 10.0]]))
    np.testing.assert_allclose(err[m], [1 / 11, 0.0, 1.0])


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 200.0), st.floats(-0.9, 5.0), st.floats(10, 2000), st.floats(0.05, 2.0))
def test_relative_error_scale_free_and_depth_form(d_gt, frac, f, b):
    d_hat = d_gt * (1 + frac)
    err, _ = relative_depth_error(np.array([[d_hat]]), np.array([[d_gt]]))
    calib = StereoCalibration(f, b)
    z_hat = disparity_to_depth(DisparityMap(np.array([[d_hat]])), calib)
    z_gt = disparity_to_depth(DisparityMap(np.array([[d_gt]])), calib)
    err_z, _ = relative_depth_error_from_depth(z_hat, z_gt)
    assert err[0, 0] == pytest.approx(abs(1 - d_gt / d_hat), rel=1e-12)
    assert err_z[0, 0] == pytest.approx(err[0, 0], rel=1e-9, abs=1e-12)


def test_bin_counts():
    assert WrdeConfig.rsrd().num_bins == 40
    assert WrdeConfig.kitti().num_bins == 107


def test_bin_errors_single_bin():
    cfg = WrdeConfig.rsrd()
    z = DepthMap(np.array([[2.01, 2.02]]))
    curve = bin_errors(z, np.array([[0.1, 0.3]]), cfg)
    assert curve.counts[0] == 2 and curve.mean_errors[0] == pytest.approx(0.2)
    assert np.isnan(curve.mean_errors[1:]).all() and curve.counts[1:].sum() == 0


def test_empty_range_then_wrde_errors():
    cfg = WrdeConfig.rsrd()
    curve = bin_errors(DepthMap(np.full((2, 2), 50.0)), np.zeros((2, 2)), cfg)
    assert curve.counts.sum() == 0
    with pytest.raises(MetricError):
        wrde(curve, cfg)


def test_wrde_examples():
    assert wrde(curve_of([0.02] * 6), cfg_n(6)) == pytest.approx(0.02, abs=1e-15)
    assert wrde(curve_of([0, 0, 0, 0, 0, 0.12]), cfg_n(6)) == pytest.approx(0.03, abs=1e-15)
    assert wrde(curve_of([0.1, 0.2, 0.3]), cfg_n(3)) == pytest.approx(0.1 / 6 + 0.2 / 3 + 0.3 / 2, abs=1e-15)


def test_wrde_weights_n3_and_n6():
    np.testing.assert_allclose(wrde_weights(cfg_n(3)), [1 / 6, 1 / 3, 1 / 2])
    np.testing.assert_allclose(wrde_weights(cfg_n(6)), [1 / 12, 1 / 12, 1 / 6, 1 / 6, 1 / 4, 1 / 4])


def test_kitti_weights_not_renormalized():
    cfg = WrdeConfig.kitti()
    w = wrde_weights(cfg)
    near, mid = 107 // 3, 2 * 107 // 3
    expected = (near * 1 + (mid - near) * 2 + (107 - mid) * 3) / (2 * 107)
    assert w.sum() == pytest.approx(expected, abs=1e-15)
    assert w.sum() != pytest.approx(1.0, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200))
def test_weights_sum_to_one(k):
    assert abs(wrde_weights(cfg_n(3 * k)).sum() - 1.0) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=6, max_size=60), st.data())
def test_wrde_strictly_monotone_in_each_bin(errs, data):
    n = len(errs)
    cfg = cfg_n(n)
    i = data.draw(st.integers(0, n - 1))
    bumped = list(errs)
    bumped[i] += 0.01
    assert wrde(curve_of(bumped), cfg) > wrde(curve_of(errs), cfg)


def test_missing_bins_excluded():
    # N counts contributing bins only
    e = [0.1, np.nan, 0.1, 0.2, 0.2, np.nan, 0.3, 0.3, 0.3]
    cfg = cfg_n(9)
    seg = [0, 0, 0, 1, 1, 1, 2, 2, 2]
    expected = sum((1, 2, 3)[s] / (2 * 7) * v for s, v in zip(seg, e) if not np.isnan(v))
    assert wrde(curve_of(e), cfg) == pytest.approx(expected, abs=1e-15)
    assert segment_means(curve_of(e), cfg) == pytest.approx((0.1, 0.2, 0.3))


def test_too_few_bins():
    with pytest.raises(MetricError):
        wrde(curve_of([0.1, 0.2, np.nan]), cfg_n(3))


def test_segment_means_examples():
    assert segment_means(curve_of([0.1, 0.3, 0.2, 0.4, 0.5, 0.7]), cfg_n(6)) == pytest.approx((0.2, 0.3, 0.6))
    assert segment_means(curve_of([0.4] * 9), cfg_n(9)) == pytest.approx((0.4, 0.4, 0.4))
    near, mid, far = segment_means(curve_of(np.linspace(0, 1, 12)), cfg_n(12))
    assert near <= mid <= far


def test_config_validation():
    with pytest.raises(MetricError):
        WrdeConfig(8.0, 2.0, 0.1)
    with pytest.raises(MetricError):
        WrdeConfig(0.0, 1.0, 0.5)  # fewer than 3 bins
    with pytest.raises(MetricError):
        WrdeConfig(0.0, 3.0, 1.0, (1.0, -2.0, 3.0))


def _brute_wrde(pred, gt, fb, z_min, z_max, interval):
    n = math.floor((z_max - z_min) / interval + 1e-9)
    acc = {}
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p <= 1e-6 or g <= 1e-6:
            continue
        z = fb / g
        k = math.floor((z - z_min) / interval)
        if not (0 <= k < n) or z >= z_max:
            continue
        acc.setdefault(k, []).append(abs((fb / p - z) / z))
    N = len(acc)
    total = 0.0
    for k, vals in acc.items():
        seg_w = 1 if k < n // 3 else (2 if k < 2 * n // 3 else 3)
        total += seg_w / (2 * N) * (sum(vals) / len(vals))
    return total


@pytest.mark.parametrize("seed", range(4))
def test_wrde_matches_bruteforce_depth_form(seed):
    rng = np.random.default_rng(100 + seed)
    calib = StereoCalibration(rng.uniform(300, 1000), rng.uniform(0.1, 0.6))
    cfg = WrdeConfig(7.0, 50.0, 0.4)
    gt = calib.fb / rng.uniform(6.0, 55.0, (20, 25))
    pred = np.clip(gt + rng.normal(0, 1.0, gt.shape), 0.0, None)
    rep = evaluate_disparity(DisparityMap(pred, pred > 0), gt, calib, cfg)
    ref = _brute_wrde(pred, gt, calib.fb, cfg.z_min, cfg.z_max, cfg.interval)
    assert rep.wrde == pytest.approx(ref, rel=1e-10)


def test_analytic_curve_constant_offset():
    calib = StereoCalibration(720.0, 0.12)
    cfg = WrdeConfig.rsrd()
    gt = np.linspace(calib.fb / 8.0, calib.fb / 2.0, 4000)[::-1][None]
    rel, m = relative_depth_error(gt + 1.0, gt)
    curve = bin_errors(disparity_to_depth(DisparityMap(gt), calib), rel, cfg, m)
    ok = curve.contributing
    d_center = calib.fb / curve.bin_centers[ok]
    np.testing.assert_allclose(curve.mean_errors[ok], 1 / (1 + d_center), atol=1e-3)
    assert np.all(np.diff(curve.mean_errors[ok]) > 0)


def test_curve_merge_pixel_weighted(tmp_path):
    a = BinnedErrorCurve([0.5, 1.5, 2.5], [0.1, np.nan, 0.3], [1, 0, 3])
    b = BinnedErrorCurve([0.5, 1.5, 2.5], [0.4, 0.2, np.nan], [3, 1, 0])
    m = a.merge(b)
    np.testing.assert_allclose(m.mean_errors, [(0.1 + 1.2) / 4, 0.2, 0.3])
    assert m.counts.tolist() == [4, 1, 3]
    a.to_csv(tmp_path / "c.csv")
    back = BinnedErrorCurve.from_csv(tmp_path / "c.csv")
    assert np.isnan(back.mean_errors[1]) and back.counts.tolist() == [1, 0, 3]
    assert back.mean_errors[2] == 0.3
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "bin_center_m,mean_rel_err,count"


def _report(w, cfg=None):
    cfg = cfg or cfg_n(3)
    return MetricReport(0.5, 0.1, 0.05, 0.01, w, (w, w, w), 100, cfg, curve_of([w] * 3))


def test_compare_models_ranking_and_rows():
    t = compare_models({"B": _report(0.0069), "A": _report(0.0062)})
    assert [r["name"] for r in t.rows] == ["A", "B"]
    assert [r["rank"] for r in t.rows] == [1, 2]
    single = compare_models({"only": _report(0.01)})
    assert len(single.rows) == 1 and single.rows[0]["wrde"] == 0.01
    twin = compare_models({"x": _report(0.02), "y": _report(0.02)})
    strip = lambda r: {k: v for k, v in r.items() if k not in ("name", "rank")}
    assert strip(twin.rows[0]) == strip(twin.rows[1])


def test_compare_rejects_mixed_configs():
    with pytest.raises(MetricError):
        compare_models({"a": _report(0.1), "b": _report(0.1, WrdeConfig(0.0, 6.0, 2.0))})


def test_report_json_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    calib = StereoCalibration(720.0, 0.12)
    gt = calib.fb / rng.uniform(2.0, 8.0, (30, 30))
    rep = evaluate_disparity(gt * 1.05, gt, calib, WrdeConfig.rsrd())
    rep.to_json(tmp_path / "r.json")
    rep.curve.to_csv(tmp_path / "c.csv")
    back = MetricReport.from_files(tmp_path / "r.json", tmp_path / "c.csv")
    assert back.wrde == rep.wrde and back.config == rep.config
    np.testing.assert_array_equal(back.curve.counts, rep.curve.counts)
