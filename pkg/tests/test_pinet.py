import json

import numpy as np
import pytest

import oracles
from polyode import pinet


def test_monomial_count_and_enumeration():
    assert pinet.monomial_count(1, 1) == 2          # 1, y
    assert pinet.monomial_count(3, 2) == 10
    assert pinet.monomial_count(2, 3) == 10
    monos = pinet.monomials(2, 2)
    assert len(monos) == 6
    assert tuple([0, 0]) in [tuple(e) for e in monos]
    assert all(sum(e) <= 2 for e in monos)


def test_default_width_is_monomial_count():
    net = pinet.PiNet(m=3, degree=2)
    assert net.width == 10
    assert net.param_count == 2 * (10 * 3 + 10) + 3 * 10 + 3


def test_degree_one_reduces_to_affine():
    net = pinet.PiNet(m=2, degree=1, width=3, m_out=2)
    rng = np.random.default_rng(30)
    params = rng.uniform(-1.0, 1.0, size=net.layout.size)
    p = net.layout.unflatten(params)
    x = rng.uniform(-2.0, 2.0, size=(5, 2))
    want = (x @ p["A1"].T + p["b1"]) @ p["C"].T + p["c"]
    assert np.allclose(net.forward(params, x), want, rtol=0.0, atol=1e-14)


def test_zero_parameters_give_zero_output():
    net = pinet.PiNet(m=3, degree=2)
    params = np.zeros(net.layout.size)
    out = net.forward(params, np.array([1.0, -2.0, 3.0]))
    assert np.array_equal(out, np.zeros(3))


def test_hand_set_square_term():
    # one unit carries y, the second stage multiplies by 3.8y and adds the skip;
    # the output map then removes the leftover linear part
    net = pinet.PiNet(m=1, degree=2, width=1, m_out=1)
    arrays = {
        "A1": np.array([[1.0]]), "b1": np.zeros(1),
        "A2": np.array([[3.8]]), "b2": np.zeros(1),
        "C": np.array([[1.0]]), "c": np.zeros(1),
    }
    params = net.layout.flatten(arrays)
    # p2 = (3.8y)*y + y, so forward(2) = 15.2 plus the configured linear part
    assert float(net.forward(params, np.array([2.0]))[0]) == pytest.approx(15.2 + 2.0)
    model = net.extract_polynomial(params)
    assert model.coeffs[0][(2,)] == pytest.approx(3.8)
    assert model.coeffs[0][(1,)] == pytest.approx(1.0)
    assert model.coeffs[0][(0,)] == 0.0


def test_extract_embedded_linear_model():
    net = pinet.PiNet(m=1, degree=1)
    params = net.embed_linear(np.array([[-10000.0]]))
    model = net.extract_polynomial(params)
    assert model.coeffs[0][(1,)] == -10000.0
    assert model.coeffs[0][(0,)] == 0.0


def test_hand_set_three_variable_quadratic():
    # exactly -0.5*y1^2 + 1.85*y2 - 6.5*y3^2: quadratic units for y1 and y3
    # plus pass-through units whose output weights cancel the skip linears
    net = pinet.PiNet(m=3, degree=2, width=5, m_out=1)
    a1 = np.zeros((5, 3))
    a1[0, 0] = 1.0   # unit0 carries y1
    a1[1, 1] = 1.0   # unit1 carries y2
    a1[2, 2] = 1.0   # unit2 carries y3
    a1[3, 0] = 1.0   # unit3 duplicates y1 (to cancel the skip)
    a1[4, 2] = 1.0   # unit4 duplicates y3
    a2 = np.zeros((5, 3))
    a2[0, 0] = -0.5  # unit0 -> -0.5 y1^2 + y1
    a2[2, 2] = -6.5  # unit2 -> -6.5 y3^2 + y3
    arrays = {
        "A1": a1, "b1": np.zeros(5),
        "A2": a2, "b2": np.zeros(5),
        "C": np.array([[1.0, 1.85, 1.0, -1.0, -1.0]]), "c": np.zeros(1),
    }
    params = net.layout.flatten(arrays)
    model = net.extract_polynomial(params)
    want = {(2, 0, 0): -0.5, (0, 1, 0): 1.85, (0, 0, 2): -6.5}
    for exps, coef in model.coeffs[0].items():
        if exps in want:
            assert coef == pytest.approx(want[exps], rel=1e-14)
        else:
            assert abs(coef) < 1e-12
    rng = np.random.default_rng(31)
    for x in rng.uniform(-3.0, 3.0, size=(20, 3)):
        direct = -0.5 * x[0] ** 2 + 1.85 * x[1] - 6.5 * x[2] ** 2
        assert float(net.forward(params, x)[0]) == pytest.approx(direct, rel=1e-12, abs=1e-12)


def test_extraction_matches_forward_on_random_nets():
    rng = np.random.default_rng(32)
    for trial in range(10):
        m = int(rng.integers(1, 4))
        degree = int(rng.integers(1, 4))
        net = pinet.PiNet(m=m, degree=degree)
        params = rng.uniform(-1.0, 1.0, size=net.layout.size)
        model = net.extract_polynomial(params)
        pts = rng.uniform(-2.0, 2.0, size=(100, m))
        net_out = net.forward(params, pts)
        poly_out = model.evaluate(pts)
        gap = np.abs(net_out - poly_out) / (1.0 + np.abs(net_out))
        assert np.max(gap) < 1e-9


def test_recovered_model_evaluate_matches_monomial_oracle():
    rng = np.random.default_rng(33)
    net = pinet.PiNet(m=2, degree=3)
    params = rng.uniform(-1.0, 1.0, size=net.layout.size)
    model = net.extract_polynomial(params)
    for x in rng.uniform(-1.5, 1.5, size=(10, 2)):
        want = oracles.eval_monomials(model.coeffs[0], x)
        assert float(model.evaluate(x)[0]) == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_degree_bound_on_random_line():
    # restrict the network to a random line; D+1 interpolation points must
    # reproduce it everywhere if the output truly has degree <= D
    rng = np.random.default_rng(34)
    net = pinet.PiNet(m=3, degree=3)
    params = rng.uniform(-1.0, 1.0, size=net.layout.size)
    x0 = rng.uniform(-1.0, 1.0, size=3)
    v = rng.uniform(-1.0, 1.0, size=3)
    ts = np.linspace(-1.0, 1.0, net.degree + 1)
    vals = [net.forward(params, x0 + t * v)[0] for t in ts]
    fit = np.polyfit(ts, vals, net.degree)
    for t in rng.uniform(-1.0, 1.0, size=20):
        direct = net.forward(params, x0 + t * v)[0]
        assert np.polyval(fit, t) == pytest.approx(direct, rel=1e-8, abs=1e-8)


def test_init_params_determinism_and_scale():
    net = pinet.PiNet(m=2, degree=2)
    p1 = net.init_params(seed=42)
    p2 = net.init_params(seed=42)
    assert np.array_equal(p1, p2)
    assert not np.array_equal(p1, net.init_params(seed=43))
    assert np.array_equal(net.init_params(seed=1, scale=0.0), np.zeros(net.layout.size))
    p = net.layout.unflatten(net.init_params(seed=7, scale=1e-3))
    assert np.abs(p["A1"]).max() <= 1e-3
    assert np.array_equal(p["b1"], np.zeros(net.width))
    assert np.array_equal(p["c"], np.zeros(net.m_out))


def test_forward_t_matches_forward():
    from polyode.autodiff import Tape, leaf

    net = pinet.PiNet(m=2, degree=3)
    params = net.init_params(seed=8, scale=0.5)
    x = np.random.default_rng(35).uniform(-1.0, 1.0, size=(4, 2))
    tape = Tape()
    theta = leaf(tape, params)
    out = net.forward_t(theta, x)
    assert np.max(np.abs(out.value - net.forward(params, x))) < 1e-14


def test_state_jacobian_t_matches_plain():
    from polyode.autodiff import Tape, leaf

    net = pinet.PiNet(m=2, degree=2)
    params = net.init_params(seed=9, scale=0.5)
    x = np.random.default_rng(36).uniform(-1.0, 1.0, size=(3, 2))
    tape = Tape()
    theta = leaf(tape, params)
    jt = net.state_jacobian_t(theta, x)
    assert np.max(np.abs(jt.value - net.state_jacobian(params, x))) < 1e-14


def test_hybrid_known_term():
    known = lambda xb: np.stack([xb[:, 1], -xb[:, 0]], axis=1)
    known_jac = lambda xb: np.broadcast_to(
        np.array([[0.0, 1.0], [-1.0, 0.0]]), (xb.shape[0], 2, 2))
    net = pinet.PiNet(m=2, degree=1, known=known, known_jac=known_jac)
    params = np.zeros(net.layout.size)
    x = np.array([[2.0, 3.0]])
    assert np.allclose(net.forward(params, x), [[3.0, -2.0]])
    jac = net.state_jacobian(params, x)
    assert np.allclose(jac[0], [[0.0, 1.0], [-1.0, 0.0]])
    with pytest.raises(ValueError):
        pinet.PiNet(m=2, degree=1, known=known)  # jac missing


def test_checkpoint_roundtrip(tmp_path):
    net = pinet.PiNet(m=2, degree=2, width=7, m_out=2)
    params = net.init_params(seed=11, scale=0.2)
    path = tmp_path / "ck.json"
    pinet.save_checkpoint(path, net, params, seed=11)
    net2, params2, seed = pinet.load_checkpoint(path)
    assert (net2.m, net2.degree, net2.width, net2.m_out) == (2, 2, 7, 2)
    assert seed == 11
    assert np.array_equal(params, params2)


def test_recovered_model_json_roundtrip_is_identity(tmp_path):
    net = pinet.PiNet(m=2, degree=2)
    params = net.init_params(seed=12, scale=0.9)
    model = net.extract_polynomial(params)
    path = tmp_path / "model.json"
    model.save(path)
    once = pinet.RecoveredModel.load(path)
    path2 = tmp_path / "model2.json"
    once.save(path2)
    again = pinet.RecoveredModel.load(path2)
    assert once.coeffs == again.coeffs
    assert json.loads(path.read_text()) == json.loads(path2.read_text())
    assert once.coeffs == model.coeffs


def test_invalid_shapes_rejected():
    with pytest.raises(ValueError):
        pinet.PiNet(m=0, degree=1)
    with pytest.raises(ValueError):
        pinet.PiNet(m=1, degree=0)
    net = pinet.PiNet(m=2, degree=1)
    with pytest.raises(ValueError):
        net.forward(net.init_params(0), np.array([1.0, 2.0, 3.0]))
