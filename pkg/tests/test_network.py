import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from kitsunet.losses import multiscale_loss
from kitsunet.network import NetworkSpec, ShapeError, build, parameter_count


def test_minimal_network_runs():
    spec = NetworkSpec(levels=2, base_features=1, num_classes=1, supervised_levels=1)
    out = build(spec, 0)(torch.randn(1, 1, 4, 4, 4))
    assert len(out) == 1 and out[0].shape == (1, 1, 4, 4, 4)


def test_default_spec_has_four_heads():
    spec = NetworkSpec()
    net = build(spec, 0)
    assert len(net.heads) == 4
    assert spec.head_shapes((192, 192, 48)) == [
        (192, 192, 48), (96, 96, 24), (48, 48, 12), (24, 24, 6)]


def test_same_seed_same_parameters():
    spec = NetworkSpec(levels=3, base_features=4, supervised_levels=2)
    a, b = build(spec, 11).state_dict(), build(spec, 11).state_dict()
    c = build(spec, 12).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize("spec", [
    NetworkSpec(),
    NetworkSpec(levels=4, base_features=8, supervised_levels=3),
    NetworkSpec(levels=2, base_features=3, convs_per_level=3, supervised_levels=1),
])
def test_parameter_count_closed_form(spec):
    net = build(spec, 0)
    assert sum(p.numel() for p in net.parameters()) == parameter_count(spec)


def test_indivisible_patch_rejected():
    net = build(NetworkSpec(levels=5, base_features=2), 0)
    with pytest.raises(ShapeError):
        net(torch.randn(1, 1, 24, 24, 24))
    # 32 x 32 x 16 is divisible by 16 and therefore legal
    assert len(net(torch.randn(1, 1, 32, 32, 16))) == 4


def test_zero_head_gives_uniform_softmax():
    net = build(NetworkSpec(levels=3, base_features=2, supervised_levels=2), 0)
    with torch.no_grad():
        net.heads[0].weight.zero_()
        net.heads[0].bias.zero_()
    out = net(torch.randn(1, 1, 8, 8, 8))[0]
    assert torch.all(out == 0)
    torch.testing.assert_close(torch.softmax(out, 1), torch.full_like(out, 1 / 3))


def test_invalid_specs():
    with pytest.raises(ValueError):
        NetworkSpec(levels=1)
    with pytest.raises(ValueError):
        NetworkSpec(levels=3, supervised_levels=3)


@settings(max_examples=8, deadline=None)
@given(st.integers(2, 4), st.integers(1, 3), st.data())
def test_head_shape_law(levels, base, data):
    sup = data.draw(st.integers(1, levels - 1))
    spec = NetworkSpec(levels=levels, base_features=base, supervised_levels=sup)
    d = spec.divisor
    patch = (2 * d,) + tuple(d * data.draw(st.integers(1, 2)) for _ in range(2))
    out = build(spec, 0)(torch.randn(1, 1, *patch))
    assert [tuple(o.shape[2:]) for o in out] == spec.head_shapes(patch)
    assert all(o.shape[1] == 3 for o in out)


def test_single_voxel_bottleneck_rejected():
    spec = NetworkSpec(levels=3, base_features=2, supervised_levels=2)
    with pytest.raises(ShapeError):
        spec.check_patch((4, 4, 4))
    spec.check_patch((4, 4, 8))


def test_eval_forward_deterministic():
    net = build(NetworkSpec(levels=3, base_features=4, supervised_levels=2), 1).eval()
    x = torch.randn(1, 1, 8, 8, 8)
    with torch.no_grad():
        a, b = net(x), net(x)
    assert all(torch.equal(p, q) for p, q in zip(a, b))


def test_gradient_reaches_every_parameter():
    spec = NetworkSpec(levels=3, base_features=4, supervised_levels=2)
    net = build(spec, 0)
    x = torch.randn(2, 1, 16, 16, 8)
    y = torch.from_numpy(np.random.default_rng(0).integers(0, 3, size=(2, 16, 16, 8)))
    multiscale_loss(net(x), y).backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
    assert dead == []
