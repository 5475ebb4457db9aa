import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kitsunet.augment import (AugmentConfig, augment_pair, gamma_transform, mirror,
                              rotation_matrix, warp_pair)


def _pair(rng, shape=(16, 16, 12)):
    return rng.normal(size=shape).astype(np.float32), \
        rng.integers(0, 3, size=shape).astype(np.uint8)


def test_all_probabilities_zero_is_identity(rng):
    img, lab = _pair(rng)
    out_img, out_lab = augment_pair(img, lab, AugmentConfig.disabled(), seed=3)
    assert out_img.tobytes() == img.tobytes()
    assert out_lab.tobytes() == lab.tobytes()


def test_mirror_only_x(rng):
    cfg = AugmentConfig.disabled()
    cfg.p_mirror, cfg.mirror_axes = 1.0, (0,)
    img = np.full((6, 5, 4), 2.5, np.float32)
    _, lab = _pair(rng, (6, 5, 4))
    out_img, out_lab = augment_pair(img, lab, cfg, seed=0)
    np.testing.assert_array_equal(out_img, img)
    np.testing.assert_array_equal(out_lab, lab[::-1])


def test_gamma_one_is_identity(rng):
    img = rng.uniform(0, 1, size=(8, 8, 8))
    np.testing.assert_allclose(gamma_transform(img, 1.0), img, atol=1e-6)


def test_gamma_keeps_range(rng):
    img = rng.normal(size=(8, 8, 8))
    out = gamma_transform(img, 1.4)
    assert out.min() == pytest.approx(img.min()) and out.max() == pytest.approx(img.max())


def test_rotation_of_one_hot_voxel_matches_matrix_oracle():
    shape = (9, 9, 9)
    center = np.array([4, 4, 4])
    for angles in [(0, 0, 90), (90, 0, 0), (0, 90, 0)]:
        R = rotation_matrix(angles)
        src = np.array([6, 4, 3])
        dst = np.rint(R @ (src - center) + center).astype(int)
        img = np.zeros(shape)
        lab = np.zeros(shape, np.uint8)
        img[tuple(src)] = 1.0
        lab[tuple(src)] = 2
        out_img, out_lab = warp_pair(img, lab, R)
        assert out_lab[tuple(dst)] == 2 and out_lab.sum() == 2
        assert out_img[tuple(dst)] == pytest.approx(1.0, abs=1e-9)
        assert out_img.sum() == pytest.approx(1.0, abs=1e-9)


def test_z_rotation_moves_x_onto_y():
    # 90 degrees about z maps +x to +y
    R = rotation_matrix((0, 0, 90))
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_determinism_and_label_values(seed):
    rng = np.random.default_rng(seed % 1000)
    img, lab = _pair(rng, (12, 12, 8))
    cfg = AugmentConfig(p_rotation=0.8, p_scale=0.8, p_elastic=0.8, p_gamma=0.8, p_mirror=0.5,
                        elastic_sigma=3.0, elastic_magnitude=2.0)
    a = augment_pair(img, lab, cfg, seed)
    b = augment_pair(img, lab, cfg, seed)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert a[0].shape == img.shape and a[1].shape == lab.shape
    assert set(np.unique(a[1])) <= {0, 1, 2}
    assert a[1].dtype == np.uint8


def test_mirror_involution(rng):
    img, _ = _pair(rng)
    for axes in [(0,), (1, 2), (0, 1, 2)]:
        np.testing.assert_array_equal(mirror(mirror(img, axes), axes), img)


def test_out_of_bounds_fill_is_patch_minimum(rng):
    img = rng.uniform(5, 10, size=(10, 10, 10))
    out, _ = warp_pair(img, np.zeros(img.shape, np.uint8), np.eye(3) * 0.5)
    assert out.min() >= img.min() - 1e-9
    assert np.isclose(out[0, 0, 0], img.min())


def test_config_violations():
    bad = AugmentConfig(scale_range=(0.0, 1.0), gamma_range=(1.5, 0.7), p_gamma=1.5)
    assert len(bad.violations()) == 3
    assert AugmentConfig().violations() == []
