import time

import numpy as np
import pytest
from numpy.polynomial import legendre as npleg
from scipy.integrate import quad

from statpod.exceptions import InvalidParameterError, PivotDegeneracyError
from statpod.ftt import (CrossConfig, TTFunction, legendre_basis, maxvol, snapshot_box,
                         tt_cross, tt_eval, tt_feedback_law, tt_sum_of_coordinates)
from statpod.riccati import FeedbackLaw


def box(ell, a=-1.0, b=1.0):
    return np.tile([a, b], (ell, 1))


def test_legendre_orthonormal_on_interval():
    a, b = 0.5, 3.0
    G = np.array([[quad(lambda x: legendre_basis(x, 4, a, b)[i] * legendre_basis(x, 4, a, b)[j],
                        a, b)[0] for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(G, np.eye(4), atol=1e-12)


def test_constant_function():
    c = np.zeros((1, 3, 1))
    c[0, 0, 0] = np.sqrt(2.0)  # phi_0 = 1/sqrt(2) on [-1, 1]
    f = TTFunction([c, c.copy(), c.copy()], box(3))
    X = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    np.testing.assert_allclose(f(X), 1.0, rtol=1e-14)
    assert tt_eval(f, X[0]) == pytest.approx(1.0, rel=1e-14)


def test_separable_product():
    c = np.zeros((1, 2, 1))
    c[0, 1, 0] = np.sqrt(2.0 / 3.0)  # x = sqrt(2/3) phi_1 on [-1, 1]
    f = TTFunction([c, c.copy()], box(2))
    assert abs(f(np.array([0.5, -0.4])) + 0.2) <= 1e-15


def test_explicit_sum_tt():
    rng = np.random.default_rng(1)
    dom = np.array([[-1.0, 2.0], [0.0, 1.0], [-3.0, -1.0]])
    f = tt_sum_of_coordinates(dom, n=3)
    X = dom[:, 0] + (dom[:, 1] - dom[:, 0]) * rng.random((100, 3))
    np.testing.assert_allclose(f(X), X.sum(axis=1), atol=1e-13)
    assert f.ranks == [1, 2, 2, 1]
    np.testing.assert_allclose([f(x) for x in X[:5]], X[:5].sum(axis=1), atol=1e-13)


def test_rank_chain_validation():
    with pytest.raises(InvalidParameterError):
        TTFunction([np.ones((1, 2, 2)), np.ones((3, 2, 1))], box(2))
    with pytest.raises(InvalidParameterError):
        TTFunction([np.ones((1, 2, 2))], box(1))
    with pytest.raises(InvalidParameterError):
        TTFunction([np.ones((1, 2, 1))], np.array([[1.0, 1.0]]))


def test_clamping():
    f = tt_sum_of_coordinates(box(2))
    assert f(np.array([5.0, -7.0])) == pytest.approx(0.0, abs=1e-14)


def test_scaling_one_core_scales_values():
    f = tt_sum_of_coordinates(box(4), weights=[1.0, -2.0, 0.5, 3.0], n=3)
    X = np.random.default_rng(2).uniform(-1, 1, (30, 4))
    for k in range(4):
        g = f.scaled(k, -1.7)
        np.testing.assert_allclose(g(X), -1.7 * f(X), rtol=1e-13, atol=1e-14)


def test_cross_constant_oracle():
    f = tt_cross(lambda x: 2.5, box(4), CrossConfig(n=3))
    assert f.converged and f.ranks == [1, 1, 1, 1, 1]
    X = np.random.default_rng(3).uniform(-1, 1, (50, 4))
    np.testing.assert_allclose(f(X), 2.5, rtol=1e-13)


def test_cross_sum_of_coordinates():
    f = tt_cross(lambda x: x.sum(), box(5), CrossConfig(n=2, tolerance=1e-12))
    X = np.random.default_rng(4).uniform(-1, 1, (200, 5))
    assert np.abs(f(X) - X.sum(axis=1)).max() <= 1e-12
    assert max(f.ranks) <= 2


def test_cross_rank_two_polynomial_twenty_dims():
    rng = np.random.default_rng(5)
    w, v = rng.standard_normal(20), rng.standard_normal(20)
    dom = np.column_stack([-1 - rng.random(20), 1 + rng.random(20)])

    def g(x):
        return np.prod(1 + 0.1 * w * x) + 0.3 * np.prod(1 - 0.05 * v * x ** 2)

    f = tt_cross(g, dom, CrossConfig(n=3, tolerance=1e-13, max_rank=4))
    X = dom[:, 0] + (dom[:, 1] - dom[:, 0]) * rng.random((300, 20))
    ref = np.array([g(x) for x in X])
    assert np.abs(f(X) - ref).max() <= 1e-12


def test_interpolation_on_last_cross_and_cost_model():
    oracle = lambda x: np.exp(-np.sum(x ** 2)) + np.sin(x[0] * x[2])
    f = tt_cross(oracle, box(4), CrossConfig(n=5, max_rank=3, max_sweeps=6, tolerance=1e-14))
    P = f.info["last_cross"]
    ref = np.array([oracle(p) for p in P])
    assert np.abs(f(P) - ref).max() <= 1e-10 * np.abs(ref).max()
    for calls, sizes in zip(f.info["calls_per_sweep"], f.info["pass_sizes"]):
        assert calls <= sum(a * 5 * b for a, b in sizes)


def test_cross_rank_cap_not_converged():
    # (x1 + x2)(x2 + x3)... has TT rank 2 interfaces; cap at 1
    g = lambda x: np.prod(x[:-1] + x[1:])
    f = tt_cross(g, box(4), CrossConfig(n=3, max_rank=1, max_sweeps=4, tolerance=1e-10))
    assert not f.converged
    assert f.info["validation_error"] > 1e-10


def test_cross_config_validation():
    with pytest.raises(InvalidParameterError):
        CrossConfig(tolerance=0.0)
    with pytest.raises(InvalidParameterError):
        CrossConfig(max_rank=0)
    with pytest.raises(InvalidParameterError):
        CrossConfig(pivoting="random")


def test_maxvol_dominance():
    A = np.random.default_rng(6).standard_normal((60, 7))
    rows = maxvol(A)
    assert len(set(rows)) == 7
    assert np.abs(A @ np.linalg.inv(A[rows])).max() <= 1.05 + 1e-12


def test_maxvol_singular():
    with pytest.raises(PivotDegeneracyError):
        maxvol(np.zeros((5, 2)))


def test_snapshot_box_margin():
    X = np.array([[0.0, -1.0], [2.0, 1.0]])
    np.testing.assert_allclose(snapshot_box(X), [[-0.2, 2.2], [-1.2, 1.2]])


def test_feedback_law_linear_oracle():
    rng = np.random.default_rng(7)
    K = rng.standard_normal((2, 6))
    src = FeedbackLaw("LQR", lambda x: -(K @ x))
    law = tt_feedback_law(src, box(6, -0.5, 0.5), CrossConfig(n=2), control_dim=2)
    X = rng.uniform(-0.5, 0.5, (20, 6))
    for x in X:
        np.testing.assert_allclose(law(x), -(K @ x), atol=1e-10)
    assert law.kind == "TT" and len(law.metadata["tts"]) == 2


def test_feedback_law_zero_oracle():
    law = tt_feedback_law(lambda x: np.zeros(1), box(3), CrossConfig(n=3))
    assert np.all(law(np.array([0.3, -0.2, 0.9])) == 0.0)


def test_evaluation_speed_twenty_dims():
    rng = np.random.default_rng(8)
    ranks = [1] + [20] * 19 + [1]
    cores = [rng.standard_normal((ranks[k], 6, ranks[k + 1])) / 6 for k in range(20)]
    f = TTFunction(cores, box(20))
    X = rng.uniform(-1, 1, (200, 20))
    times = []
    for x in X:
        t0 = time.perf_counter()
        f(x)
        times.append(time.perf_counter() - t0)
    assert np.median(times) <= 1e-3
    # single-point and batch paths agree
    np.testing.assert_allclose([f(x) for x in X[:5]], f(X[:5]), rtol=1e-12)
