import copy
import pickle

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coral.nn import AdamState, FeedForwardNet, adam_step, grad_check, relu, sigmoid, soft_update


def _mse_fixture(net, seed=0, n=6):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, net.sizes[0]))
    t = rng.standard_normal((n, net.sizes[-1]))

    def loss():
        return 0.5 * float(np.sum((net.forward(x) - t) ** 2))

    out, acts = net.forward(x, return_cache=True)
    grads, _ = net.backward(acts, out - t)
    return loss, grads


def test_sigmoid_is_stable_at_extremes():
    x = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    p = sigmoid(x)
    assert np.all(np.isfinite(p))
    assert p[2] == 0.5
    np.testing.assert_allclose(p[1] + p[3], 1.0)


def test_relu():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def test_adam_first_step_is_lr():
    p = [np.array([0.0])]
    adam_step(p, [np.array([1.0])], AdamState(), lr=0.001)
    assert p[0][0] == pytest.approx(-0.001, rel=1e-7)


def test_adam_zero_grad_no_move():
    p = [np.array([0.3, -0.2])]
    adam_step(p, [np.zeros(2)], AdamState(), lr=0.001)
    np.testing.assert_array_equal(p[0], [0.3, -0.2])


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=8))
def test_adam_sign_symmetry(g):
    g = np.array(g)
    a, b = [np.zeros_like(g)], [np.zeros_like(g)]
    adam_step(a, [g], AdamState(), lr=0.01)
    adam_step(b, [-g], AdamState(), lr=0.01)
    np.testing.assert_array_equal(a[0], -b[0])


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState(), lr=0.1)


def test_linear_net_grad_check_tight():
    net = FeedForwardNet([4, 3], seed=1)
    loss, grads = _mse_fixture(net)
    assert grad_check(loss, net.params, grads) < 1e-7


def test_relu_net_grad_check():
    net = FeedForwardNet([5, 7, 6, 2], seed=2)
    loss, grads = _mse_fixture(net)
    assert grad_check(loss, net.params, grads) < 1e-4


def test_grad_check_catches_corruption():
    net = FeedForwardNet([4, 3], seed=1)
    loss, grads = _mse_fixture(net)
    assert grad_check(loss, net.params, [2 * g for g in grads]) > 0.3


def test_skip_net_grad_check_and_identity_start():
    net = FeedForwardNet([4, 8, 4], seed=3, out_scale=0.0, skip=True)
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(net.forward(x), x)
    loss, grads = _mse_fixture(net)
    assert grad_check(loss, net.params, grads) < 1e-4


def test_skip_needs_matching_widths():
    with pytest.raises(ValueError):
        FeedForwardNet([4, 8, 3], skip=True)


def test_input_gradient_matches_finite_differences():
    net = FeedForwardNet([3, 5, 2], seed=4, skip=False)
    x = np.random.default_rng(1).standard_normal((1, 3))
    out, acts = net.forward(x, return_cache=True)
    _, gx = net.backward(acts, np.ones_like(out))
    h = 1e-6
    for j in range(3):
        e = np.zeros_like(x)
        e[0, j] = h
        num = (net.forward(x + e).sum() - net.forward(x - e).sum()) / (2 * h)
        assert gx[0, j] == pytest.approx(num, rel=1e-5, abs=1e-8)


def test_params_are_views_of_flat_buffer():
    net = FeedForwardNet([3, 4, 2], seed=0)
    net.flat[:] = 0.0
    assert all(np.all(p == 0) for p in net.params)
    assert net.n_params == 3 * 4 + 4 + 4 * 2 + 2


def test_copy_and_deepcopy_are_independent():
    net = FeedForwardNet([3, 4, 2], seed=0)
    for dup in (net.copy(), copy.deepcopy(net), pickle.loads(pickle.dumps(net))):
        dup.weights[0][0, 0] += 1.0
        assert dup.flat[0] == net.flat[0] + 1.0
        assert dup.sizes == net.sizes


def test_step_descends():
    net = FeedForwardNet([4, 6, 1], seed=5)
    loss, grads = _mse_fixture(net)
    before = loss()
    for _ in range(50):
        loss, grads = _mse_fixture(net)
        net.step(grads, 0.01)
    assert loss() < before


@pytest.mark.parametrize("tau", [0.0, 0.005, 0.5, 1.0])
def test_soft_update_exact(tau):
    a = FeedForwardNet([3, 4, 2], seed=0)
    b = FeedForwardNet([3, 4, 2], seed=1)
    expected = tau * a.flat + (1 - tau) * b.flat
    soft_update(b, a, tau)
    np.testing.assert_allclose(b.flat, expected, rtol=0, atol=1e-15)


def test_soft_update_arithmetic_example():
    a = FeedForwardNet([1, 1], seed=0)
    b = FeedForwardNet([1, 1], seed=0)
    a.flat[:] = 1.0
    b.flat[:] = 0.0
    soft_update(b, a, 0.005)
    np.testing.assert_array_equal(b.flat, [0.005, 0.005])


def test_soft_update_shape_mismatch():
    with pytest.raises(ValueError):
        soft_update(FeedForwardNet([2, 3]), FeedForwardNet([2, 4]), 0.1)


def test_forward_width_check():
    with pytest.raises(ValueError):
        FeedForwardNet([3, 2]).forward(np.zeros(4))
