import numpy as np
import pytest
from helpers import random_network

from liplocal.bounds import bcp_forward, ibp_forward, interval_maxmin, sample_l2_ball
from liplocal.errors import DomainError
from liplocal.network import forward, make_toy_network

X_TOY = np.array([1.0, -1.0, 0.0])


def test_toy_intervals():
    b = ibp_forward(make_toy_network(), X_TOY, 0.1)
    np.testing.assert_allclose(np.stack([b.lb[0][0], b.ub[0][0]], 1), [[2.7, 3.3], [-2.2, -1.8], [-0.1, 0.1]])
    np.testing.assert_allclose(b.post_lb[0][0], [1, 0, 0])
    np.testing.assert_allclose(b.post_ub[0][0], [1, 0, 0.1])
    np.testing.assert_allclose(b.lb[1][0], [3, 0, 0])
    np.testing.assert_allclose(b.ub[1][0], [3, 0, 0.1])


def test_toy_ball_radius():
    b = bcp_forward(make_toy_network(), X_TOY, 0.1)
    np.testing.assert_allclose(np.broadcast_to(b.ball_radius[0], (1, 3))[0], [0.3, 0.2, 0.1])
    np.testing.assert_allclose(np.stack([b.lb[0][0], b.ub[0][0]], 1), [[2.7, 3.3], [-2.2, -1.8], [-0.1, 0.1]])


def test_negative_eps_rejected():
    with pytest.raises(DomainError):
        ibp_forward(make_toy_network(), X_TOY, -0.1)


@pytest.mark.parametrize("prop", [ibp_forward, bcp_forward])
def test_zero_eps_is_exact(prop):
    rng = np.random.default_rng(0)
    net = random_network(rng, 3)
    x = rng.standard_normal(net.input_shape)
    b = prop(net, x, 0.0)
    _, pre, _ = forward(net, x, return_activations=True)
    for lb, ub, z in zip(b.lb, b.ub, pre):
        np.testing.assert_allclose(lb, z, atol=1e-12)
        np.testing.assert_allclose(ub, z, atol=1e-12)


def test_invariants_and_bcp_tighter():
    rng = np.random.default_rng(1)
    for _ in range(20):
        net = random_network(rng)
        x = rng.standard_normal((3,) + net.input_shape)
        ib, bb = ibp_forward(net, x, 0.3), bcp_forward(net, x, 0.3)
        for i in range(len(net.layers)):
            assert np.all(ib.lb[i] <= ib.ub[i]) and np.all(bb.lb[i] <= bb.ub[i])
            # two rounding chains: allow 1e-12 slack for the elementwise intersection
            assert np.all(bb.lb[i] >= ib.lb[i] - 1e-12) and np.all(bb.ub[i] <= ib.ub[i] + 1e-12)
            assert np.all(bb.ball_radius[i] >= 0)
            np.testing.assert_array_equal(ib.midpoint(i), (ib.lb[i] + ib.ub[i]) / 2)


def test_monotone_in_eps():
    rng = np.random.default_rng(2)
    for _ in range(10):
        net = random_network(rng)
        x = rng.standard_normal(net.input_shape)
        for prop in (ibp_forward, bcp_forward):
            small, big = prop(net, x, 0.05), prop(net, x, 0.2)
            for i in range(len(net.layers)):
                assert np.all(big.lb[i] <= small.lb[i] + 1e-12) and np.all(big.ub[i] >= small.ub[i] - 1e-12)


def test_interval_maxmin_examples():
    hi_lo = interval_maxmin(np.array([0.0]), np.array([1.0]), np.array([2.0]), np.array([3.0]), 10.0, -10.0)
    (mx_l, mx_u), (mn_l, mn_u) = hi_lo
    assert (mx_l[0], mx_u[0], mn_l[0], mn_u[0]) == (2, 3, 0, 1)
    (mx_l, mx_u), (mn_l, mn_u) = interval_maxmin(np.array([0.0]), np.array([5.0]), np.array([1.0]),
                                                 np.array([2.0]), 3.0, -10.0)
    assert (mx_l[0], mx_u[0], mn_l[0], mn_u[0]) == (1, 3, 0, 2)


def test_sampling_soundness_small():
    rng = np.random.default_rng(3)
    for _ in range(10):
        net = random_network(rng)
        x = rng.standard_normal(net.input_shape)
        pts = sample_l2_ball(x, 0.2, 300, rng)
        _, pre, _ = forward(net, pts, return_activations=True)
        for prop in (ibp_forward, bcp_forward):
            b = prop(net, x, 0.2)
            for i, z in enumerate(pre):
                assert np.all(z >= b.lb[i] - 1e-9) and np.all(z <= b.ub[i] + 1e-9)


def test_sample_l2_ball_stays_inside():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 3))
    pts = sample_l2_ball(x, 0.5, 1000, rng)
    assert np.linalg.norm((pts - x).reshape(1000, -1), axis=1).max() <= 0.5 + 1e-12
