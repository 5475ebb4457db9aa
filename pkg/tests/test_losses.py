import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from kitsunet.losses import (LossConfig, default_level_weights, downsample_labels, exp_log_dice,
                             loss_components, multiscale_loss, one_hot, soft_dice, total_loss,
                             weighted_ce)

CFG = LossConfig()


def _probs_from_labels(labels, confident=True):
    oh = one_hot(torch.as_tensor(labels)).double()
    return oh if confident else torch.full_like(oh, 1 / 3)


def test_config_weights_sum_to_one():
    assert sum(CFG.ce_weights) == pytest.approx(1.0)
    assert sum(CFG.dice_weights) == pytest.approx(1.0)
    assert CFG.violations() == []
    assert LossConfig(ce_weights=(0.3, 0.3, 0.3)).violations()


def test_soft_dice_examples():
    lab = torch.zeros(1, 4, 4, 4, dtype=torch.long)
    lab[0, :2, :2, :1] = 1
    p = _probs_from_labels(lab)
    assert soft_dice(p, one_hot(lab), 1).item() == pytest.approx(1.0, abs=1e-12)
    # disjoint supports
    other = torch.zeros_like(lab)
    other[0, 2:, 2:, 3:] = 1
    d = soft_dice(_probs_from_labels(other), one_hot(lab), 1).item()
    assert d == pytest.approx(1e-5 / (4 + 4 + 1e-5))
    # |pred| = |gt| = 4, overlap 2
    pred = torch.zeros_like(lab)
    pred[0, 1:3, :2, :1] = 1
    d = soft_dice(_probs_from_labels(pred), one_hot(lab), 1).item()
    assert abs(d - 0.5) < 1e-5


def test_exp_log_dice_values():
    assert exp_log_dice(1.0, 1.0).item() == pytest.approx(1e-6 ** 0.3)
    assert exp_log_dice(math.exp(-1), math.exp(-1)).item() == pytest.approx(1.0, abs=1e-6)
    # 50-digit evaluation: (ln 2)^0.3 = 0.89587545554677892...
    assert exp_log_dice(0.5, 0.5).item() == pytest.approx(0.8959, abs=1e-3)
    assert exp_log_dice(0.5, 0.5).item() == pytest.approx(0.8958754555467789, abs=1e-12)


def test_exp_log_dice_strictly_decreasing():
    d = np.linspace(0.01, 0.99, 50)
    vk = [exp_log_dice(x, 0.5).item() for x in d]
    vt = [exp_log_dice(0.5, x).item() for x in d]
    assert np.all(np.diff(vk) < 0) and np.all(np.diff(vt) < 0)


def test_weighted_ce_examples():
    lab = torch.tensor([0, 1, 2, 0, 1, 2]).reshape(1, 6, 1, 1)
    uniform = _probs_from_labels(lab, confident=False)
    assert weighted_ce(uniform, lab).item() == pytest.approx(math.log(3), abs=1e-6)
    bg = torch.zeros_like(lab)
    assert weighted_ce(uniform, bg).item() == pytest.approx(0.28 * math.log(3), abs=1e-6)
    assert weighted_ce(_probs_from_labels(lab), lab).item() == pytest.approx(0.0, abs=1e-12)


def test_weighted_ce_monotone_in_true_class_probability(rng):
    lab = torch.from_numpy(rng.integers(0, 3, size=(1, 4, 4, 2)))
    logits = torch.from_numpy(rng.normal(size=(1, 3, 4, 4, 2)))
    base = weighted_ce(torch.softmax(logits, 1), lab).item()
    for idx in [(0, 0, 0), (1, 2, 1), (3, 3, 0)]:
        bumped = logits.clone()
        c = lab[(0,) + idx].item()
        bumped[(0, c) + idx] += 1.0
        assert weighted_ce(torch.softmax(bumped, 1), lab).item() <= base


def test_total_is_sum_of_components(rng):
    logits = torch.from_numpy(rng.normal(size=(2, 3, 4, 4, 4)))
    lab = torch.from_numpy(rng.integers(0, 3, size=(2, 4, 4, 4)))
    dice, ce = loss_components(logits, lab)
    assert total_loss(logits, lab).item() == (dice + ce).item()


def test_perfect_prediction_reaches_floor():
    lab = torch.zeros(1, 8, 8, 8, dtype=torch.long)
    lab[0, 2:5, 2:5, 2:5] = 1
    lab[0, 5:7, 5:7, 5:7] = 2
    logits = one_hot(lab).double() * 60.0
    assert total_loss(logits, lab).item() == pytest.approx(CFG.floor_value, rel=1e-3)
    assert CFG.floor_value == pytest.approx(0.0158, abs=1e-4)
    heads = [logits, logits[..., ::2, ::2, ::2]]
    assert multiscale_loss(heads, lab).item() == pytest.approx(CFG.floor_value, rel=1e-3)


def test_downsample_labels():
    lab = torch.from_numpy(np.indices((4, 4, 4)).sum(0) % 2)
    assert downsample_labels(lab, 0) is lab
    down = downsample_labels(lab, 1)
    assert down.shape == (2, 2, 2)
    assert torch.equal(down, lab[::2, ::2, ::2])
    assert torch.all(down == 0)  # even coordinates of a checkerboard share parity
    const = torch.full((8, 8, 8), 2)
    assert torch.all(downsample_labels(const, 2) == 2)
    with pytest.raises(ValueError):
        downsample_labels(torch.zeros(6, 6, 6), 2)


def test_multiscale_single_level_equals_total(rng):
    logits = torch.from_numpy(rng.normal(size=(1, 3, 4, 4, 4)))
    lab = torch.from_numpy(rng.integers(0, 3, size=(1, 4, 4, 4)))
    assert multiscale_loss([logits], lab).item() == total_loss(logits, lab).item()


def test_multiscale_hand_weighted(rng):
    l0 = torch.from_numpy(rng.normal(size=(1, 3, 8, 8, 8)))
    l1 = torch.from_numpy(rng.normal(size=(1, 3, 4, 4, 4)))
    lab = torch.from_numpy(rng.integers(0, 3, size=(1, 8, 8, 8)))
    cfg = LossConfig(level_weights=(2 / 3, 1 / 3))
    expected = 2 / 3 * total_loss(l0, lab).item() + 1 / 3 * total_loss(l1, lab[:, ::2, ::2, ::2]).item()
    assert multiscale_loss([l0, l1], lab, cfg).item() == pytest.approx(expected, rel=1e-12)
    assert default_level_weights(2) == pytest.approx([2 / 3, 1 / 3])


def test_multiscale_shape_mismatch(rng):
    lab = torch.zeros(1, 8, 8, 8, dtype=torch.long)
    with pytest.raises(ValueError):
        multiscale_loss([torch.zeros(1, 3, 8, 8, 8), torch.zeros(1, 3, 8, 8, 8)], lab)


def finite_difference_check(seed, step=1e-3):
    rng = np.random.default_rng(seed)
    l0 = torch.from_numpy(rng.normal(size=(1, 3, 8, 8, 8))).requires_grad_()
    l1 = torch.from_numpy(rng.normal(size=(1, 3, 4, 4, 4))).requires_grad_()
    lab = torch.from_numpy(rng.integers(0, 3, size=(1, 8, 8, 8)))
    multiscale_loss([l0, l1], lab).backward()
    worst = 0.0
    with torch.no_grad():
        for t in (l0, l1):
            flat = t.view(-1)
            analytic = t.grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = multiscale_loss([l0, l1], lab).item()
                flat[i] = orig - step
                down = multiscale_loss([l0, l1], lab).item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                a = analytic[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst


def test_gradient_matches_finite_differences():
    assert finite_difference_check(0) <= 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_spatial_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.normal(size=(1, 3, 4, 4, 2)))
    lab = torch.from_numpy(rng.integers(0, 3, size=(1, 4, 4, 2)))
    perm = torch.from_numpy(rng.permutation(32))
    pl = logits.reshape(1, 3, -1)[..., perm].reshape(1, 3, 4, 4, 2)
    plab = lab.reshape(1, -1)[..., perm].reshape(1, 4, 4, 2)
    a, b = loss_components(logits, lab), loss_components(pl, plab)
    assert a[0].item() == pytest.approx(b[0].item(), rel=1e-12)
    assert a[1].item() == pytest.approx(b[1].item(), rel=1e-12)
