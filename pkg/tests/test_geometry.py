import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dvanet.geometry import (
    DepthMap,
    DisparityMap,
    StereoCalibration,
    depth_to_disparity,
    disparity_to_depth,
    disparity_to_pointcloud,
    normalize_depth_from_metric,
    normalize_depth_labels,
)


def test_disparity_to_depth_hand_value():
    calib = StereoCalibration(721.0, 0.54)
    z = disparity_to_depth(DisparityMap(np.array([[38.934]])), calib)
    assert z.values[0, 0] == pytest.approx(10.0, abs=1e-3)


def test_depth_to_disparity_hand_value():
    calib = StereoCalibration(100.0, 1.0)
    d = depth_to_disparity(DepthMap(np.array([[25.0]])), calib)
    assert d.values[0, 0] == 4.0


def test_zero_disparity_is_invalid_not_an_error():
    z = disparity_to_depth(DisparityMap(np.array([[0.0, 2.0]])), StereoCalibration(10.0, 1.0))
    assert z.valid_mask.tolist() == [[False, True]]
    assert z.values[0, 1] == 5.0


def test_invalid_mask_propagates():
    z = DepthMap(np.array([[5.0, 6.0]]), np.array([[False, True]]))
    d = depth_to_disparity(z, StereoCalibration(10.0, 1.0))
    assert d.valid_mask.tolist() == [[False, True]]


def test_negative_raw_disparity_becomes_invalid():
    d = DisparityMap.from_raw(np.array([[-1.0, 0.0, 3.0]]))
    assert d.valid_mask.tolist() == [[False, False, True]]


def test_calibration_rejects_non_positive():
    with pytest.raises(ValueError):
        StereoCalibration(0.0, 0.5)
    with pytest.raises(ValueError):
        StereoCalibration(700.0, -0.1)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 7), elements=st.floats(0.01, 500.0)),
       st.floats(10.0, 3000.0), st.floats(0.01, 2.0))
def test_roundtrip_identity(vals, f, b):
    calib = StereoCalibration(f, b)
    d = DisparityMap(vals)
    back = depth_to_disparity(disparity_to_depth(d, calib), calib)
    np.testing.assert_allclose(back.values, vals, rtol=1e-12)
    assert back.valid_mask.all()


def test_depth_monotone_decreasing_in_disparity():
    d = np.linspace(0.1, 100, 200)[None]
    z = disparity_to_depth(DisparityMap(d), StereoCalibration(700, 0.5)).values[0]
    assert np.all(np.diff(z) < 0)


def test_normalized_labels():
    n = normalize_depth_labels(DisparityMap(np.full((3, 3), 10.0)), 1.0)
    np.testing.assert_array_equal(n.values, 0.1)
    n = normalize_depth_labels(DisparityMap(np.array([[2.0, 4.0, 1.0]])), 2.0)
    assert n.values.tolist() == [[1.0, 0.5, 1.0]]
    assert n.clamp_count == 1


def test_normalized_from_metric():
    n = normalize_depth_from_metric(DepthMap(np.array([[6.5, 13.0, 1e-9]])), 13.0)
    np.testing.assert_allclose(n.values, [[0.5, 1.0, 1e-9 / 13]])


def test_pointcloud_principal_ray():
    calib = StereoCalibration(100.0, 0.5, principal_point=(2.0, 1.0))
    d = np.zeros((3, 5))
    d[1, 2] = 25.0        # Z = 2 at the principal point
    d[1, 4] = 25.0        # two pixels right of it
    pts = disparity_to_pointcloud(DisparityMap(d, d > 0), calib)
    np.testing.assert_allclose(pts, [[0.0, 0.0, 2.0], [2.0 * 2.0 / 100.0, 0.0, 2.0]])


def test_pointcloud_pinhole_x_equals_depth_at_cx_plus_f():
    f = 3.0
    calib = StereoCalibration(f, 1.0, principal_point=(0.0, 0.0))
    d = np.zeros((1, 4))
    d[0, 3] = f / 2.0     # Z = f*b/d = 2 m, pixel at cx + f
    pts = disparity_to_pointcloud(DisparityMap(d, d > 0), calib)
    np.testing.assert_allclose(pts, [[2.0, 0.0, 2.0]])


def test_pointcloud_empty():
    pts = disparity_to_pointcloud(DisparityMap(np.zeros((4, 4))), StereoCalibration(1.0, 1.0))
    assert pts.shape == (0, 3)
