import numpy as np
import pytest

import oracles
from polyode import autodiff, pinet
from polyode.autodiff import Tape, constant, grad, jacobian_wrt_state, leaf


def test_grad_of_quadratic_is_identity():
    at = np.array([1.0, -2.0, 0.5])
    value, g = grad(lambda th: (th * th).sum() * 0.5, at)
    assert value == pytest.approx(float(0.5 * np.sum(at ** 2)))
    assert np.allclose(g, at, rtol=0.0, atol=0.0)


def test_grad_of_constant_is_zero():
    value, g = grad(lambda th: constant(th.tape, 3.5), np.array([1.0, 2.0]))
    assert value == 3.5
    assert np.array_equal(g, np.zeros(2))


def test_grad_linearity():
    rng = np.random.default_rng(20)
    at = rng.uniform(-1.0, 1.0, size=5)
    x = rng.uniform(-1.0, 1.0, size=5)

    def f(th):
        return ((th - x) * (th - x)).sum()

    def g_fn(th):
        return (th * th  * th).sum()

    a, b = 2.5, -1.25
    _, gf = grad(f, at)
    _, gg = grad(g_fn, at)
    _, gc = grad(lambda th: f(th) * a + g_fn(th) * b, at)
    assert np.max(np.abs(gc - (a * gf + b * gg))) < 1e-12 * max(1.0, np.abs(gc).max())


def test_unused_slot_gets_exact_zero():
    def f(th):
        return (th[0:2] * th[0:2]).sum()

    _, g = grad(f, np.array([1.0, 2.0, 3.0]))
    assert g[2] == 0.0


def test_stop_gradient_halves_product_rule():
    at = np.array([0.7, -1.2])
    _, g = grad(lambda th: (th * autodiff.stop_gradient(th)).sum(), at)
    assert np.allclose(g, at, rtol=0.0, atol=1e-15)  # not 2*theta


def test_nonfinite_gradient_raises():
    def f(th):
        return (th / constant(th.tape, 0.0)).sum()

    with pytest.raises(autodiff.NonFiniteGradient):
        grad(f, np.array([1.0]))


def test_pinet_loss_gradient_matches_finite_differences():
    net = pinet.PiNet(m=2, degree=2)
    params = net.init_params(seed=3, scale=0.4)
    rng = np.random.default_rng(21)
    x = rng.uniform(-1.0, 1.0, size=(6, 2))

    def loss(th):
        out = net.forward_t(th, x)
        return (out * out).sum()

    _, g = grad(loss, params)
    fd = oracles.central_diff_grad(lambda v: grad(loss, v)[0], params)
    rel = np.max(np.abs(g - fd)) / max(1.0, np.abs(g).max())
    assert rel < 1e-6


def test_broadcasting_paths_against_finite_differences():
    # exercises unbroadcast over both batch and feature axes
    rng = np.random.default_rng(22)
    x = rng.uniform(-1.0, 1.0, size=(5, 3))

    def loss(th):
        w = th[0:3].reshape(1, 3)
        b = th[3:4]
        y = constant(th.tape, x) * w + b     # (5,3) * (1,3) + (1,)
        return (y * y).sum()

    at = rng.uniform(-1.0, 1.0, size=4)
    _, g = grad(loss, at)
    fd = oracles.central_diff_grad(lambda v: grad(loss, v)[0], at)
    assert np.max(np.abs(g - fd)) < 1e-6 * max(1.0, np.abs(g).max())


def test_expm_primitive_gradient():
    rng = np.random.default_rng(23)
    at = rng.uniform(-0.8, 0.8, size=4)

    def loss(th):
        return autodiff.expm_t(th.reshape(2, 2)).sum()

    _, g = grad(loss, at)
    fd = oracles.central_diff_grad(lambda v: grad(loss, v)[0], at)
    assert np.max(np.abs(g - fd)) < 1e-6 * max(1.0, np.abs(g).max())


def test_jacobian_of_embedded_linear_field():
    net = pinet.PiNet(m=1, degree=1)
    params = net.embed_linear(np.array([[-10000.0]]))
    jac = jacobian_wrt_state(net, np.array([7.0]), params)
    assert np.array_equal(jac, np.array([[-10000.0]]))


def test_jacobian_of_linear_network_is_constant_in_y():
    net = pinet.PiNet(m=3, degree=1)
    params = net.init_params(seed=5, scale=0.7)
    j1 = jacobian_wrt_state(net, np.array([0.3, -1.0, 2.0]), params)
    j2 = jacobian_wrt_state(net, np.array([-5.0, 4.0, 0.1]), params)
    assert np.max(np.abs(j1 - j2)) < 1e-12


def test_jacobian_matches_finite_differences():
    net = pinet.PiNet(m=3, degree=3)
    params = net.init_params(seed=6, scale=0.3)
    y = np.array([0.4, -0.9, 1.3])
    jac = jacobian_wrt_state(net, y, params)
    for i in range(3):
        def comp(v, i=i):
            return float(net.forward(params, v)[i])
        fd = oracles.central_diff_grad(comp, y, eps=1e-6)
        assert np.max(np.abs(jac[i] - fd)) < 1e-7 * max(1.0, np.abs(jac[i]).max())


def test_jacobian_agrees_with_batched_sensitivity_path():
    # reverse-mode rows vs the forward-sensitivity recurrence used in training
    net = pinet.PiNet(m=2, degree=3)
    params = net.init_params(seed=7, scale=0.5)
    ys = np.random.default_rng(24).uniform(-1.0, 1.0, size=(4, 2))
    batched = net.state_jacobian(params, ys)
    for b in range(4):
        rev = jacobian_wrt_state(net, ys[b], params)
        assert np.max(np.abs(batched[b] - rev)) < 1e-12


def test_param_layout_roundtrip_exact():
    layout = autodiff.ParamLayout.build([("a", (2, 3)), ("b", (3,)), ("c", ())])
    rng = np.random.default_rng(25)
    v = rng.uniform(-1.0, 1.0, size=layout.size)
    assert np.array_equal(layout.flatten(layout.unflatten(v)), v)
    off, end, shape = layout.slice_of("b")
    assert (off, end, shape) == (6, 9, (3,))
    with pytest.raises(KeyError):
        layout.slice_of("missing")


def test_backward_accumulates_over_reused_nodes():
    # y = x + x uses the same parent twice; gradient must be 2
    def f(th):
        s = th.sum()
        return s + s

    _, g = grad(f, np.array([1.5]))
    assert g[0] == 2.0


def test_tensor_ops_primal_values():
    tape = Tape()
    a = leaf(tape, np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = leaf(tape, np.array([[1.0, 1.0], [0.0, 1.0]]))
    assert np.array_equal((a @ b).value, a.value @ b.value)
    assert np.array_equal((a - b).value, a.value - b.value)
    assert np.array_equal((-a).value, -a.value)
    assert np.array_equal((a / 2.0).value, a.value / 2.0)
    assert np.array_equal(a.transpose_last().value, a.value.T)
    assert np.array_equal(a.sum(axis=0).value, a.value.sum(axis=0))
    assert np.array_equal(a.reshape(4).value, a.value.reshape(4))
