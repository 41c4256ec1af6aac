import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import bilinear_oracle
from stereo_selftrain.core import (DisparityMap, MultiScalePredictions, PredictionTrace,
                                   ReliabilityMap, StereoSample, resize_disparity, resize_image)


def test_resize_image_identity(rng):
    img = rng.uniform(size=(8, 8, 3)).astype(np.float32)
    out = resize_image(img, 1.0)
    assert out.shape == (8, 8, 3)
    np.testing.assert_array_equal(out, img)


def test_resize_image_constant_upscale():
    img = np.full((8, 8, 3), 0.37, dtype=np.float32)
    out = resize_image(img, 2.0)
    assert out.shape == (16, 16, 3)
    np.testing.assert_allclose(out, 0.37, atol=1e-7)


def test_resize_image_ramp_matches_oracle():
    ramp = np.tile(np.linspace(0, 1, 16, dtype=np.float32), (16, 1))[..., None]
    out = resize_image(ramp, 0.5)
    assert out.shape == (8, 8, 1)
    np.testing.assert_allclose(out, bilinear_oracle(ramp, 8, 8), atol=1e-5)


@pytest.mark.parametrize("factor", [0.0, -1.0])
def test_resize_image_rejects_nonpositive(factor):
    with pytest.raises(ValueError):
        resize_image(np.zeros((4, 4, 3)), factor)


def test_resize_image_output_dims_round():
    assert resize_image(np.zeros((10, 15, 3)), 0.5).shape == (5, 8, 3)
    t = torch.zeros(2, 3, 10, 15)
    assert resize_image(t, 2.0).shape == (2, 3, 20, 30)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.floats(0.3, 3.0), st.integers(0, 2**31 - 1))
def test_resize_image_preserves_range(h, w, factor, seed):
    img = np.random.default_rng(seed).uniform(size=(h, w, 3)).astype(np.float32)
    out = resize_image(img, factor)
    assert out.min() >= -1e-6 and out.max() <= 1 + 1e-6


def test_resize_disparity_scales_values():
    m = DisparityMap(np.full((8, 8), 4.0))
    up = resize_disparity(m, 16, 16)
    assert up.shape == (16, 16)
    np.testing.assert_allclose(up.values, 8.0)
    same = resize_disparity(m, 8, 8)
    np.testing.assert_allclose(same.values, 4.0)


def test_resize_disparity_matches_oracle(rng):
    vals = rng.uniform(0, 10, size=(6, 6))
    out = resize_disparity(DisparityMap(vals), 12, 12)
    np.testing.assert_allclose(out.values, bilinear_oracle(vals.astype(np.float32), 12, 12) * 2.0,
                               atol=1e-5, rtol=1e-6)


def test_resize_disparity_round_trip_smooth():
    y, x = np.mgrid[0:16, 0:16] / 15.0
    vals = 5 + 2 * np.sin(np.pi * x) * np.cos(np.pi * y / 2)
    m = DisparityMap(vals)
    back = resize_disparity(resize_disparity(m, 32, 32), 16, 16)
    # corner-aligned up-then-down sampling; error bounded by the interpolation error
    assert np.abs(back.values - vals).max() < 0.05


def test_stereo_sample_invariants(rng):
    img = rng.uniform(size=(4, 6, 3))
    with pytest.raises(ValueError):
        StereoSample(img, img[:, :5])
    with pytest.raises(ValueError):
        StereoSample(img, img, DisparityMap(np.zeros((4, 6))))
    with pytest.raises(ValueError):
        StereoSample(img, img, DisparityMap(np.zeros((4, 5))), np.ones((4, 5), bool))
    s = StereoSample(img, img, DisparityMap(np.zeros((4, 6))), np.ones((4, 6), bool), id="x")
    assert s.has_gt and s.shape == (4, 6)
    with pytest.raises(ValueError):
        s.left[0, 0, 0] = 1.0


def test_prediction_trace_contract():
    maps = [DisparityMap(np.full((3, 4), float(i))) for i in range(3)]
    tr = PredictionTrace(maps)
    assert tr.n == 3 and tr.stack().shape == (3, 3, 4)
    with pytest.raises(ValueError):
        PredictionTrace(maps[:1])
    with pytest.raises(ValueError):
        PredictionTrace([maps[0], DisparityMap(np.zeros((2, 2)))])
    with pytest.raises(ValueError):
        tr.predictions[0].values[0, 0] = 5.0


def test_multiscale_shape_invariant():
    orig = DisparityMap(np.zeros((8, 10)))
    MultiScalePredictions(DisparityMap(np.zeros((16, 20))), orig, DisparityMap(np.zeros((4, 5))), 2.0, 0.5)
    with pytest.raises(ValueError):
        MultiScalePredictions(DisparityMap(np.zeros((16, 21))), orig, DisparityMap(np.zeros((4, 5))), 2.0, 0.5)


def test_reliability_map_range():
    ReliabilityMap(np.array([0.0, 0.5, 1.0]))
    with pytest.raises(ValueError):
        ReliabilityMap(np.array([1.2]))
