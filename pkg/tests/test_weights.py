import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from robinhum.grid import build_grid
from robinhum.weights import (ArgmaxOutsideG1, InvalidPsi, TimeOnBoundary, WeightFamily, build_psi,
                              check_weight_bounds, constant_K, constant_M, eval_weights, lambda_threshold)

G = build_grid(41, (0.25, 0.5), (0.3, 0.45))
PSI = build_psi(G)


def test_psi_argmax_root():
    root = brentq(PSI.d1, 0.2, 0.6)
    assert root == pytest.approx(0.375, abs=1e-12)
    assert PSI.argmax == 0.375
    assert PSI(root) == pytest.approx(1.0, abs=1e-14)


def test_psi_conditions():
    assert PSI(0.0) == 0 and PSI(1.0) == pytest.approx(0.0, abs=1e-15)
    v = PSI(G.nodes)
    assert np.all(v[1:-1] > 0) and np.max(v) <= 1.0
    out = np.ones(G.M, bool)
    out[G.g1_range.start:G.g1_range.stop] = False
    assert np.all(np.abs(PSI.d1(G.nodes[out])) > 0)
    xs = np.linspace(0, 1, 10001)
    assert np.max(PSI(xs)) == pytest.approx(1.0, abs=1e-7)


def test_psi_argmax_outside():
    with pytest.raises(ArgmaxOutsideG1):
        build_psi(G, 2, 2)
    with pytest.raises(InvalidPsi):
        build_psi(G, 0, 3)


def test_alpha_examples():
    wf = WeightFamily(PSI, mu=1.0, lam=1.0, T=2.0)
    assert wf.alpha(1.0, 0.0) == pytest.approx(1 - np.e ** 2, rel=1e-14)
    a, phi, _ = eval_weights(wf, 1.0, 0.375)
    assert a == pytest.approx(np.e - np.e ** 2, rel=1e-12)
    assert phi == pytest.approx(np.e, rel=1e-12)


def test_theta_underflow_graceful():
    wf = WeightFamily(PSI, mu=1.0, lam=10.0, T=1.0)
    with np.errstate(all="raise"):
        _, _, th = eval_weights(wf, 1e-6, G.nodes)
    assert np.all(th == 0) and not np.any(np.isnan(th))
    assert np.all(wf.log_weight(0.0, G.nodes, 2, 3, 3) == -np.inf)
    with pytest.raises(TimeOnBoundary):
        wf.log_phi(0.0, G.nodes)


@given(t=st.floats(1e-3, 1 - 1e-3), lam=st.floats(0.1, 20), mu=st.floats(0.5, 2), T=st.floats(0.5, 4))
def test_weight_signs(t, lam, mu, T):
    wf = WeightFamily(PSI, mu=mu, lam=lam, T=T)
    tt = t * T
    a = wf.alpha(tt, G.nodes)
    assert np.all(a < 0)
    th = wf.theta(tt, G.nodes)
    assert np.all((th >= 0) & (th < 1))
    phi = wf.phi(tt, G.nodes)
    assert np.all(phi >= 4 / T ** 2 * np.exp(mu * 0.0) * (1 - 1e-14))


@given(t=st.floats(0.0, 1.0), eps=st.floats(1e-6, 1.0), lam=st.floats(0.1, 20))
def test_regularized_theta_dominates(t, eps, lam):
    wf = WeightFamily(PSI, mu=1.0, lam=lam, T=1.0, epsilon=eps)
    lr = wf.log_theta(t, G.nodes, regularized=True)
    assert np.all(np.isfinite(lr))
    if 0 < t < 1:
        assert np.all(2 * wf.log_theta(t, G.nodes) - 2 * lr <= 1e-12)


def test_time_derivatives_match_differences():
    wf = WeightFamily(PSI, mu=1.3, lam=1.0, T=2.0)
    x, t, h = G.nodes, 0.7, 1e-4
    fd = (wf.phi(t + h, x) - wf.phi(t - h, x)) / (2 * h)
    np.testing.assert_allclose(wf.phi_t(t, x), fd, rtol=1e-7)
    fd2 = (wf.phi(t + h, x) - 2 * wf.phi(t, x) + wf.phi(t - h, x)) / h ** 2
    np.testing.assert_allclose(wf.phi_tt(t, x), fd2, rtol=1e-5)
    fda = (wf.alpha(t + h, x) - wf.alpha(t - h, x)) / (2 * h)
    np.testing.assert_allclose(wf.alpha_t(t, x), fda, rtol=1e-7)
    assert np.all(wf.phi_t(1.0, x) == 0)


@pytest.mark.parametrize("T", [0.5, 1.0, 4.0])
def test_weight_bounds(T):
    wf = WeightFamily(PSI, mu=1.0, lam=1.0, T=T)
    times = np.linspace(0, T, 203)[1:-1]
    b = check_weight_bounds(wf, times, G.nodes)
    # phi T^2 = T^2 e^psi / (t (T-t)) >= 4, attained at t = T/2 on the boundary
    assert b["phi_lower"] >= 4 * (1 - 1e-12)
    # |phi_t| / (T phi^2) = |2t - T| e^{-psi} / T <= 1
    assert b["phi_t"] <= 1 + 1e-12
    assert b["phi_tt"] <= 2 + 2 + 1e-9
    assert b["alpha_t"] <= 1 + 1e-12


def test_threshold_zero_coefficients():
    z = {"a1": 0, "a2": 0, "B1": 0, "B2": 0, "B": 0, "beta": 0}
    assert lambda_threshold(z, 1.0).value == 2.0
    assert lambda_threshold(z, 1.0, "backward-obs").value == 2.0
    assert constant_K(z, 1.0) == 3.0
    assert constant_M(z, 1.0) == 3.0


def test_threshold_beta_quadratic():
    base = {"a1": 0.3, "a2": 0.2, "B1": 0.1, "B2": 0.1, "B": 0.1, "beta": 0.0}
    v0 = lambda_threshold(base, 1.0).value
    v1 = lambda_threshold(base | {"beta": 0.5}, 1.0).value
    v2 = lambda_threshold(base | {"beta": 1.0}, 1.0).value
    assert (v2 - v0) == pytest.approx(4 * (v1 - v0), rel=1e-12)


def test_thresholds_differ_in_a2_exponent():
    n = {"a1": 0.0, "a2": 2.0, "B1": 0.0, "B2": 0.0, "B": 0.0, "beta": 0.0}
    f = lambda_threshold(n, 1.0, "forward-obs").value
    b = lambda_threshold(n, 1.0, "backward-obs").value
    assert f == pytest.approx(2 + 2 ** (2 / 3), rel=1e-14)
    assert b == pytest.approx(2 + 4, rel=1e-14)


def test_constants_T_limits():
    z = {"a1": 0, "a2": 0, "B1": 0, "B2": 0, "B": 0, "beta": 0}
    assert constant_K(z, 1e-6) > 1e5


@pytest.mark.parametrize("T", [0.5, 1.0, 3.0])
def test_M_a2_doubling(T):
    a2 = 0.7
    n = {"a1": 0.2, "a2": a2, "B1": 0.0, "B2": 0.0, "B": 0.3, "beta": 0.4}
    d = constant_M(n | {"a2": 2 * a2}, T) - constant_M(n, T)
    assert d == pytest.approx(3 * a2 ** 2 * (1 + T), rel=1e-12)


norm_st = st.fixed_dictionaries({k: st.floats(0, 5) for k in ("a1", "a2", "B1", "B2", "B", "beta")})


@given(n=norm_st, key=st.sampled_from(["a1", "a2", "B1", "B2", "B", "beta"]), bump=st.floats(0, 3),
       T=st.floats(0.2, 5))
@settings(max_examples=60)
def test_constants_monotone(n, key, bump, T):
    m = n | {key: n[key] + bump}
    for which in ("forward-obs", "backward-obs"):
        assert lambda_threshold(m, T, which).value >= lambda_threshold(n, T, which).value
    assert constant_K(m, T) >= constant_K(n, T)
    assert constant_M(m, T) >= constant_M(n, T)
    assert lambda_threshold(n, T * 1.5).value >= lambda_threshold(n, T).value


def test_coefficient_set_norms():
    from robinhum.spde import CoefficientSet
    c = CoefficientSet(a1=lambda t, x: -3 * x, beta=(0.2, -0.7))
    times = np.linspace(0, 1, 5)
    n = c.sup_norms(G, times)
    assert n["a1"] == 3.0 and n["beta"] == 0.7
    assert lambda_threshold(c, 1.0, grid=G, times=times).value == pytest.approx(
        1 + 1 + 3 ** (2 / 3) + 0.49, rel=1e-14)
