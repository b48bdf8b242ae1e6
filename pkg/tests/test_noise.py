import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robinhum.noise import (AdaptedField, DepthTooLarge, LevelMismatch, build_tree, cond_expect, expectation,
                            ito_duality_residual, martingale_part)
from robinhum.grid import build_grid
from robinhum.spde import CoefficientSet, ProblemInstance, duality_check, random_coefficients, solve_backward, \
    solve_forward


@pytest.mark.parametrize("L,T,nodes,inc", [(1, 1.0, 3, 1.0), (2, 2.0, 7, 1.0), (10, 1.0, 2047, np.sqrt(0.1))])
def test_tree_sizes(L, T, nodes, inc):
    tr = build_tree(L, T)
    assert tr.n_nodes == nodes
    assert tr.dt == pytest.approx(T / L)
    d = tr.increments(0)
    assert d[0] == pytest.approx(inc) and d[1] == pytest.approx(-inc)


def test_tree_guards():
    with pytest.raises(DepthTooLarge):
        build_tree(30, 1.0)
    with pytest.raises(ValueError):
        build_tree(0, 1.0)
    with pytest.raises(ValueError):
        build_tree(3, 0.0)


def test_probabilities_sum_to_one():
    tr = build_tree(6, 1.0)
    for k in range(7):
        assert tr.level_size(k) * tr.probability(k) == 1.0


def test_cond_expect_examples():
    tr = build_tree(3, 1.0)
    assert cond_expect(tr, np.array([2.0, 4.0]), 0)[0] == 3.0
    same = np.repeat(np.arange(4.0), 2)
    np.testing.assert_array_equal(cond_expect(tr, same, 2), np.arange(4.0))
    dW = tr.increments(1)
    np.testing.assert_array_equal(cond_expect(tr, dW, 1), 0.0)


def test_martingale_part_examples():
    tr = build_tree(3, 0.7)
    dW = tr.increments(2)
    np.testing.assert_allclose(martingale_part(tr, dW, 2), 1.0, rtol=1e-15)
    assert np.all(martingale_part(tr, np.full(4, 5.0), 1) == 0)
    a, b = 1.3, -0.4
    xi = np.array([a + b * tr.sqrt_dt, a - b * tr.sqrt_dt])
    assert martingale_part(tr, xi, 0)[0] == pytest.approx(b, rel=1e-14)


def test_expectation_examples():
    tr = build_tree(4, 1.0)
    assert expectation(tr, np.ones(8)) == 1.0
    assert expectation(tr, tr.increments(3)) == 0.0
    assert expectation(tr, tr.increments(3) ** 2) == pytest.approx(tr.dt, rel=1e-15)


def test_level_mismatch():
    tr = build_tree(3, 1.0)
    with pytest.raises(LevelMismatch):
        cond_expect(tr, np.ones(3))
    with pytest.raises(LevelMismatch):
        martingale_part(tr, np.ones(32))
    with pytest.raises(LevelMismatch):
        AdaptedField(tr, [np.ones(2)], [0])


@given(seed=st.integers(0, 2 ** 31))
def test_tower_property(seed):
    tr = build_tree(4, 1.0)
    X = np.random.default_rng(seed).standard_normal((16, 3))
    two = cond_expect(tr, cond_expect(tr, X, 3), 2)
    np.testing.assert_allclose(two, X.reshape(4, 4, 3).mean(axis=1), rtol=1e-13, atol=1e-15)


@given(seed=st.integers(0, 2 ** 31), k=st.integers(0, 4))
def test_martingale_decomposition(seed, k):
    # X = E[X|F_k] + Z dW exactly on the two-point tree
    tr = build_tree(5, 1.3)
    X = np.random.default_rng(seed).standard_normal(2 ** (k + 1))
    m, Z = cond_expect(tr, X, k), martingale_part(tr, X, k)
    dW = tr.increments(k)
    np.testing.assert_allclose(np.repeat(m, 2) + np.repeat(Z, 2) * dW, X, atol=1e-13)
    assert np.mean(X * dW) == pytest.approx(tr.dt * np.mean(Z), abs=1e-13)


@given(seed=st.integers(0, 2 ** 31))
def test_jensen(seed):
    tr = build_tree(5, 1.0)
    X = np.random.default_rng(seed).standard_normal(32)
    assert expectation(tr, X ** 2) >= expectation(tr, X) ** 2


def test_adapted_field_algebra():
    tr = build_tree(3, 1.0)
    f = AdaptedField.from_function(tr, lambda k, t, w: w)
    g = 2.0 * f - f
    for k in range(4):
        np.testing.assert_array_equal(g[k], tr.brownian(k))
    assert (-f).max_abs() == f.max_abs()
    z = AdaptedField.zeros(tr, 5)
    assert len(z) == 4 and z[3].shape == (8, 5)


def test_duality_zero_and_constant():
    g = build_grid(16, (0.25, 0.5), (0.3, 0.45))
    tr = build_tree(4, 1.0)
    W = g.quadrature_weights
    c = CoefficientSet()
    y = solve_forward(ProblemInstance("general-forward", g, tr, c, np.zeros(16)))
    z = solve_backward(ProblemInstance("general-backward", g, tr, c, np.random.default_rng(0).standard_normal(16)))
    assert ito_duality_residual(y.state, z.state, z.martingale, (y.loads["g"], y.loads["h"]), z.loads["r"],
                                W, tr.dt) == 0
    y = solve_forward(ProblemInstance("general-forward", g, tr, c, np.sin(g.nodes)))
    z = solve_backward(ProblemInstance("general-backward", g, tr, c, np.ones(16)))
    assert ito_duality_residual(y.state, z.state, z.martingale, (y.loads["g"], y.loads["h"]), z.loads["r"],
                                W, tr.dt) == pytest.approx(0.0, abs=1e-15)


@given(seed=st.integers(0, 2 ** 31))
@settings(max_examples=10, deadline=None)
def test_duality_random_pairs(seed):
    rng = np.random.default_rng(seed)
    g = build_grid(16, (0.25, 0.5), (0.3, 0.45))
    tr = build_tree(4, 1.0)
    assert duality_check(g, tr, random_coefficients(rng), rng)["max"] <= 1e-10
