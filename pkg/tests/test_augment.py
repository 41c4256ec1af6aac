import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stereo_selftrain.augment import AugmentConfig, adjust_saturation, occlude, strong_augment
from stereo_selftrain.core import DisparityMap, StereoSample


def _sample(rng, h=24, w=48):
    gt = DisparityMap(rng.uniform(0, 5, size=(h, w)).astype(np.float32))
    return StereoSample(rng.uniform(size=(h, w, 3)), rng.uniform(size=(h, w, 3)), gt,
                        rng.uniform(size=(h, w)) > 0.2, id="x")


def _only(**kw):
    base = dict(p_saturation=0.0, p_brightness=0.0, p_occlusion=0.0, p_noise=0.0, p_blur=0.0)
    base.update(kw)
    return AugmentConfig(**base)


def test_disabled_is_bit_exact_identity(rng):
    s = _sample(rng)
    out = strong_augment(s, AugmentConfig.disabled(), rng)
    np.testing.assert_array_equal(out.left, s.left)
    np.testing.assert_array_equal(out.right, s.right)


def test_occluding_constant_region_is_fixed_point():
    img = np.full((10, 10, 3), 0.25)
    np.testing.assert_array_equal(occlude(img, 2, 3, 4, 5), img)


def test_occlusion_fills_with_region_mean(rng):
    img = rng.uniform(size=(10, 12, 3))
    out = occlude(img, 1, 2, 3, 4)
    for c in range(3):
        np.testing.assert_allclose(out[1:4, 2:6, c], img[1:4, 2:6, c].mean())
    mask = np.ones((10, 12), bool)
    mask[1:4, 2:6] = False
    np.testing.assert_array_equal(out[mask], img[mask])


def test_saturation_zero_is_channel_mean(rng):
    img = rng.uniform(size=(5, 6, 3))
    oracle = np.empty_like(img)
    for i in range(5):
        for j in range(6):
            oracle[i, j, :] = (img[i, j, 0] + img[i, j, 1] + img[i, j, 2]) / 3.0
    np.testing.assert_allclose(adjust_saturation(img, 0.0), oracle, atol=1e-12)
    np.testing.assert_allclose(adjust_saturation(img, 1.0), img, atol=1e-12)


def test_saturation_and_brightness_shared_between_views(rng):
    img = rng.uniform(size=(8, 8, 3))
    s = StereoSample(img, img.copy())
    out = strong_augment(s, _only(p_saturation=1.0, p_brightness=1.0), rng)
    np.testing.assert_array_equal(out.left, out.right)
    assert not np.array_equal(out.left, img)


def test_occlusion_touches_right_view_only(rng):
    s = _sample(rng, 32, 256)
    cfg = _only(p_occlusion=1.0, occlusion_count_range=(2, 2))
    out = strong_augment(s, cfg, rng)
    np.testing.assert_array_equal(out.left, s.left)
    assert not np.array_equal(out.right, s.right)


def test_labels_pass_through(rng):
    s = _sample(rng)
    out = strong_augment(s, AugmentConfig(p_saturation=1, p_brightness=1, p_occlusion=1, p_noise=1, p_blur=1), rng)
    assert out.gt_disparity is s.gt_disparity
    assert out.validity is s.validity
    assert out.id == s.id


def test_same_seed_same_output(rng):
    s = _sample(rng)
    cfg = AugmentConfig(p_saturation=1, p_brightness=1, p_occlusion=1, p_noise=1, p_blur=1)
    a, b = strong_augment(s, cfg, 99), strong_augment(s, cfg, 99)
    np.testing.assert_array_equal(a.left, b.left)
    np.testing.assert_array_equal(a.right, b.right)
    c = strong_augment(s, cfg, 100)
    assert not np.array_equal(a.right, c.right)


@pytest.mark.parametrize("kwargs", [
    dict(saturation_range=(1.4, 0.0)),
    dict(brightness_range=(1.2, 0.8)),
    dict(p_noise=1.5),
    dict(p_blur=-0.1),
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        AugmentConfig(**kwargs)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_output_range_and_geometry(seed, p_a, p_b):
    rng = np.random.default_rng(seed)
    s = _sample(rng, 12, 32)
    cfg = AugmentConfig(p_saturation=p_a, p_brightness=p_b, p_occlusion=p_a, p_noise=p_b, p_blur=p_a)
    out = strong_augment(s, cfg, rng)
    assert out.left.shape == s.left.shape and out.right.shape == s.right.shape
    for img in (out.left, out.right):
        assert img.min() >= 0.0 and img.max() <= 1.0
