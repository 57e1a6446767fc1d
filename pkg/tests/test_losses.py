import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tednet import gradcheck as G
from tednet import layers as L
from tednet import losses
from tednet.model import TEDNet, TrellisConfig


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def test_mse_values():
    assert losses.mse_loss(np.ones((2, 2)), np.ones((2, 2)))[0] == 0
    assert losses.mse_loss(np.array([1.0, 0.0]), np.array([0.0, 0.0]))[0] == 0.5
    with pytest.raises(L.ShapeError):
        losses.mse_loss(np.ones(3), np.ones(4))


def test_mse_gradient_tight(rng):
    z, y = rng.uniform(size=(1, 1, 4, 4)), rng.uniform(size=(1, 1, 4, 4))
    assert G.grad_check(G.Loss(losses.mse_loss), [z, y]) < 1e-8


def test_sal_hand_example():
    # level 0 sees the changed non-max pixel, level 1 does not
    y = np.array([[1.0, 2.0, 0.0, 0.0],
                  [3.0, 9.0, 0.0, 5.0],
                  [0.0, 0.0, 4.0, 4.5],
                  [7.0, 0.0, 0.0, 1.0]])
    z = y.copy()
    z[0, 0] = 2.0
    value, _ = losses.sal_loss(z, y, k=1)
    assert value == pytest.approx(1.0 / 16, abs=1e-15)
    assert losses.sal_loss(y, y, k=2)[0] == 0


def test_sal_levels_match_manual_pyramid(rng):
    z, y = rng.uniform(size=(1, 1, 16, 16)), rng.uniform(size=(1, 1, 16, 16))
    expect, zk, yk = 0.0, z, y
    for level in range(4):
        if level:
            zk, yk = L.maxpool2(zk)[0], L.maxpool2(yk)[0]
        expect += float(np.mean((zk - yk) ** 2))
    assert losses.sal_loss(z, y, 3)[0] == pytest.approx(expect, rel=1e-14)


def test_sal_rejects_non_divisible():
    with pytest.raises(L.ShapeError, match="2\\^3"):
        losses.sal_loss(np.ones((1, 1, 12, 12)), np.ones((1, 1, 12, 12)), 3)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 3.0])
def test_scl_scale_invariance(rng, alpha):
    y = rng.uniform(0.1, 1, size=(1, 1, 8, 8))
    assert abs(losses.scl_loss(alpha * y, y)[0]) < 1e-12


def test_scl_disjoint_support_and_degenerate():
    z = np.zeros((4, 4))
    y = np.zeros((4, 4))
    z[0, 0], y[3, 3] = 1.0, 2.0
    assert losses.scl_loss(z, y)[0] == 1.0
    value, grad = losses.scl_loss(np.zeros((4, 4)), y)
    assert value == 0.0 and not grad.any()


def test_combinatorial_composition(rng):
    z, y = rng.uniform(size=(2, 1, 8, 8)), rng.uniform(size=(2, 1, 8, 8))
    sal, g_sal = losses.sal_loss(z, y, 3)
    scl, g_scl = losses.scl_loss(z, y)
    for lam in (0.0, 0.25, 1.0, 2.0):
        v, g = losses.combinatorial_loss(z, y, lam, 3)
        assert v == sal + lam * scl
        np.testing.assert_array_equal(g, g_sal + lam * g_scl)
    assert losses.combinatorial_loss(z, z)[0] == 0
    with pytest.raises(ValueError):
        losses.combinatorial_loss(z, y, -1.0)


def test_batched_loss_is_sum_of_samples(rng):
    z, y = rng.uniform(size=(3, 1, 8, 8)), rng.uniform(size=(3, 1, 8, 8))
    for fn in (losses.mse_loss, losses.scl_loss, losses.sal_loss):
        total = fn(z, y)[0]
        assert total == pytest.approx(sum(fn(z[b], y[b])[0] for b in range(3)), rel=1e-14)


def test_loss_gradients():
    for name, layer, inputs in G.loss_checks(np.random.default_rng(4)):
        assert G.grad_check(layer, inputs) < 1e-5, name


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(0, 10)),
       st.floats(0.01, 100))
def test_scl_property_scale(y, alpha):
    value = losses.scl_loss(alpha * y, y)[0]
    if alpha * np.sum(y * y) < 1e-12:  # degenerate rule
        assert value == 0.0
    else:
        assert abs(value) < 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(0, 10)),
       arrays(np.float64, (8, 8), elements=st.floats(0, 10)))
def test_losses_finite_and_nonnegative(z, y):
    for kind in losses.LOSS_KINDS:
        v, g = losses.head_loss(kind, z, y)
        assert math.isfinite(v) and v >= -1e-12
        assert np.isfinite(g).all()


def _outputs(seed=0):
    net = TEDNet(TrellisConfig(base_channels=2), seed=seed, dtype=np.float64)
    return net.forward(np.random.default_rng(seed).uniform(size=(2, 3, 32, 32)))


def test_distributed_total_is_sum_of_heads():
    out = _outputs()
    y = np.random.default_rng(1).uniform(size=(2, 1, 32, 32))
    report, grads = losses.distributed_loss(out, y, 1.0, 3)
    assert set(report.per_head) == {"2D", "3D", "4D", "Z"}
    expect = 0.0
    for h, z in out.heads().items():
        target = y if h == "Z" else L.avgpool(y, 4)
        v, g = losses.combinatorial_loss(z.astype(np.float64), target, 1.0, 3)
        assert report.per_head[h] == v
        np.testing.assert_array_equal(grads[h], g)
        expect += v
    assert report.total == expect
    row = report.csv_values()
    assert len(row) == len(losses.LossReport.CSV_HEADER) and row[0] == report.total


def test_distributed_perfect_heads_zero():
    out = _outputs(1)
    y = np.random.default_rng(2).uniform(0.1, 1, size=(2, 1, 32, 32))
    out.z = y.copy()
    out.z2d = out.z3d = out.z4d = L.avgpool(y, 4)
    report, _ = losses.distributed_loss(out, y)
    assert abs(report.total) < 1e-12


def test_distributed_single_supervision():
    out = _outputs(2)
    y = np.random.default_rng(3).uniform(size=(2, 1, 32, 32))
    report, grads = losses.distributed_loss(out, y, kind="mse", heads=("Z",))
    assert set(grads) == {"Z"}
    assert report.total == losses.mse_loss(out.z, y)[0]


def test_distributed_resolution_mismatch():
    out = _outputs()
    with pytest.raises(L.ShapeError):
        losses.distributed_loss(out, np.ones((2, 1, 16, 16)))
