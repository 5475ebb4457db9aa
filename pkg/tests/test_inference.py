import numpy as np
import pytest
import torch

from kitsunet.inference import (CaseGeometry, argmax_labels, blend_windows, finalize, make_grid,
                                mirror_combinations, pad_for_window, predict_volume)
from kitsunet.network import NetworkSpec, build
from kitsunet.volcore import CropRecord, ProbabilityVolume, Spacing, Volume


def test_grid_single_window():
    g = make_grid((8, 8, 8), (8, 8, 8), 0.5)
    assert g.origins == ((0, 0, 0),)


@pytest.mark.parametrize("length, expected", [(96, [0, 32]), (65, [0, 1]), (64, [0]),
                                              (100, [0, 32, 36])])
def test_grid_axis_origins(length, expected):
    g = make_grid((length, 64, 64), (64, 64, 64), 0.5)
    assert sorted({o[0] for o in g.origins}) == expected
    assert g.stride == (32, 32, 32)


def test_grid_sorted_and_covering():
    rng = np.random.default_rng(0)
    for _ in range(50):
        window = tuple(int(w) for w in rng.integers(1, 10, size=3))
        shape = tuple(int(w + e) for w, e in zip(window, rng.integers(0, 15, size=3)))
        g = make_grid(shape, window, float(rng.uniform(0, 0.9)))
        assert list(g.origins) == sorted(g.origins)
        assert g.hit_counts(shape).min() >= 1


def test_blend_weights_sum_to_one():
    rng = np.random.default_rng(7)
    for _ in range(20):
        window = tuple(int(w) for w in rng.integers(2, 7, size=3))
        shape = tuple(int(w + e) for w, e in zip(window, rng.integers(0, 9, size=3)))
        g = make_grid(shape, window, float(rng.uniform(0, 0.9)))
        out = blend_windows(g, shape, (np.ones((1,) + window) for _ in g.origins))
        assert np.array_equal(out[0], np.ones(shape))


class ConstantNet:
    def __init__(self, logits):
        self.logits = torch.tensor(logits, dtype=torch.float32)

    def __call__(self, x):
        return [self.logits.view(1, -1, 1, 1, 1).expand(x.shape[0], -1, *x.shape[2:])]


def test_constant_stub_gives_constant_probabilities():
    vol = Volume(np.random.default_rng(1).normal(size=(12, 10, 8)).astype(np.float32))
    prob = predict_volume(ConstantNet([1.0, 2.0, 0.5]), vol, (8, 8, 8), 0.5, (0, 1, 2))
    expected = torch.softmax(torch.tensor([1.0, 2.0, 0.5], dtype=torch.float64), 0).numpy()
    np.testing.assert_allclose(prob.data, expected[:, None, None, None] * np.ones((1, 12, 10, 8)),
                               atol=1e-6)
    assert prob.is_normalized()


class CallCounter:
    """Emits a different constant logit vector on every call."""

    def __init__(self):
        self.calls = 0
        self.outputs = []

    def __call__(self, x):
        self.calls += 1
        logits = torch.tensor([float(self.calls), 0.0, -float(self.calls)])
        self.outputs.append(torch.softmax(logits.double(), 0).numpy())
        return logits.view(1, 3, 1, 1, 1).expand(1, 3, *x.shape[2:])


def test_overlap_region_is_mean_of_windows():
    net = CallCounter()
    vol = Volume(np.zeros((12, 8, 8), np.float32))
    prob = predict_volume(net, vol, (8, 8, 8), 0.5, ())
    assert net.calls == 2  # origins 0 and 4 along x
    a, b = net.outputs
    np.testing.assert_allclose(prob.data[:, :4, 0, 0], np.repeat(a[:, None], 4, 1), atol=1e-6)
    np.testing.assert_allclose(prob.data[:, 4:8, 0, 0], np.repeat(((a + b) / 2)[:, None], 4, 1),
                               atol=1e-6)
    np.testing.assert_allclose(prob.data[:, 8:, 0, 0], np.repeat(b[:, None], 4, 1), atol=1e-6)


class XEquivariant(torch.nn.Module):
    """Pointwise map, hence equivariant to every flip."""

    def forward(self, x):
        return [torch.cat([x, -x, x * x], dim=1)]


def test_mirror_tta_on_symmetric_input():
    base = np.random.default_rng(2).normal(size=(4, 8, 8)).astype(np.float32)
    sym = np.concatenate([base, base[::-1]], axis=0)
    vol = Volume(sym)
    a = predict_volume(XEquivariant(), vol, (8, 8, 8), 0.5, ())
    b = predict_volume(XEquivariant(), vol, (8, 8, 8), 0.5, (0,))
    np.testing.assert_allclose(a.data, b.data, atol=1e-6)


def test_mirror_involution_random_network():
    net = build(NetworkSpec(levels=3, base_features=4, supervised_levels=2), 5).eval()
    data = np.random.default_rng(3).normal(size=(12, 12, 8)).astype(np.float32)
    window = (8, 8, 8)
    for axes in [(0,), (1, 2), (0, 1, 2)]:
        p = predict_volume(net, Volume(data), window, 0.5, (0, 1, 2))
        q = predict_volume(net, Volume(np.flip(data, axes).copy()), window, 0.5, (0, 1, 2))
        np.testing.assert_allclose(np.flip(q.data, [a + 1 for a in axes]), p.data, atol=1e-6)


def test_window_larger_than_volume_rejected():
    with pytest.raises(ValueError):
        predict_volume(ConstantNet([0, 0, 0]), Volume(np.zeros((4, 4, 4))), (8, 8, 8))


def test_pad_for_window_centres():
    vol, rec = pad_for_window(Volume(np.ones((5, 8, 9), np.float32)), (8, 8, 8))
    assert vol.shape == (8, 8, 9)
    assert rec.offset == (1, 0, 0)
    np.testing.assert_array_equal(rec.crop(vol.data), np.ones((5, 8, 9)))


def test_mirror_combinations_count():
    assert len(mirror_combinations((0, 1, 2))) == 8
    assert mirror_combinations(()) == [()]


def test_finalize_without_resampling(rng):
    logits = rng.normal(size=(3, 4, 5, 6))
    p = np.exp(logits) / np.exp(logits).sum(0)
    geom = CaseGeometry(CropRecord((4, 5, 6)), (4, 5, 6), Spacing(1, 1, 1))
    out = finalize(ProbabilityVolume(p, (1, 1, 1)), geom)
    np.testing.assert_array_equal(out.data, p.argmax(0))


def test_argmax_ties_to_lowest_class():
    p = np.full((3, 2, 2, 2), 1 / 3)
    assert np.all(argmax_labels(p) == 0)
    p[1] = p[2] = 0.5
    p[0] = 0.0
    assert np.all(argmax_labels(p) == 1)


def test_finalize_upsample_constant_region():
    p = np.zeros((3, 4, 4, 4))
    p[0] = 1.0
    p[:, 1:3, 1:3, 1:3] = 0.0
    p[2, 1:3, 1:3, 1:3] = 1.0
    geom = CaseGeometry(CropRecord((4, 4, 4)), (8, 8, 8), Spacing(0.5, 0.5, 0.5))
    out = finalize(ProbabilityVolume(p, (1, 1, 1)), geom)
    assert out.shape == (8, 8, 8)
    # corner-aligned: output i samples source i/2; half-way points tie and go to class 0
    want = np.zeros((8, 8, 8), np.uint8)
    want[2:5, 2:5, 2:5] = 2
    np.testing.assert_array_equal(out.data, want)
    assert out.spacing == Spacing(0.5, 0.5, 0.5)


def test_finalize_crops_padding():
    p = np.zeros((3, 6, 4, 4))
    p[1] = 1.0
    p[:, :1] = 0
    p[0, :1] = 1.0
    geom = CaseGeometry(CropRecord((4, 4, 4), (1, 0, 0)), (4, 4, 4), Spacing(1, 1, 1))
    out = finalize(ProbabilityVolume(p, (1, 1, 1)), geom)
    assert np.all(out.data == 1)


def test_finalize_requires_geometry():
    with pytest.raises(ValueError):
        finalize(ProbabilityVolume(np.ones((3, 2, 2, 2)) / 3), None)
