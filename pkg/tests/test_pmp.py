import numpy as np
import pytest

from instances import random_ocp
from statpod.burgers2d import BurgersConfig, assemble
from statpod.exceptions import InvalidParameterError
from statpod.pmp import (OcpDefinition, adjoint_gradient, forward_cost, lq_initial_guess,
                         pmp_solve, warm_start_choice)
from statpod.qbsys import QuadraticBilinearSystem, QuadraticTensor
from statpod.spod import build_reduced


def scalar_ocp(a=0.0, b=1.0, T=1.0, n_t=2):
    sys = QuadraticBilinearSystem(np.eye(1), np.array([[a]]), QuadraticTensor.zeros(1),
                                  np.array([[b]]))
    return OcpDefinition(sys, np.eye(1), np.eye(1), T, n_t)


def fd_gradient(defn, ic, u, eps=1e-5):
    g = np.zeros_like(u)
    for idx in np.ndindex(u.shape):
        up, um = u.copy(), u.copy()
        up[idx] += eps
        um[idx] -= eps
        g[idx] = (forward_cost(defn, ic, up)[1] - forward_cost(defn, ic, um)[1]) / (2 * eps)
    return g


def test_zero_ic_zero_control_costs_nothing():
    rng = np.random.default_rng(0)
    defn = random_ocp(rng, 4, 5)
    _, cost = forward_cost(defn, np.zeros(4), defn.zero_control())
    assert cost == 0.0


def test_constant_state_cost():
    defn = scalar_ocp(b=0.0, n_t=4)
    _, cost = forward_cost(defn, np.array([1.0]), np.zeros((4, 1)))
    assert abs(cost - 1.0) <= 1e-15


def test_cost_linear_in_state_weight():
    P = assemble(BurgersConfig(n_side=9))
    ic = np.full(81, 0.05)
    d1 = OcpDefinition(P.system, P.Q, np.zeros((1, 1)) + 1.0, 50.0, 100)
    d2 = OcpDefinition(P.system, 2 * P.Q, np.zeros((1, 1)) + 1.0, 50.0, 100)
    c1 = forward_cost(d1, ic, d1.zero_control())[1]
    c2 = forward_cost(d2, ic, d2.zero_control())[1]
    assert np.isfinite(c1) and c1 > 0
    assert c2 == 2 * c1


def test_invalid_weights():
    sys = scalar_ocp().system
    with pytest.raises(InvalidParameterError):
        OcpDefinition(sys, np.eye(1), np.zeros((1, 1)), 1.0, 2)
    with pytest.raises(InvalidParameterError):
        OcpDefinition(sys, -np.eye(1), np.eye(1), 1.0, 2)
    with pytest.raises(InvalidParameterError):
        OcpDefinition(sys, np.eye(2), np.eye(1), 1.0, 2)


def test_gradient_without_input_is_control_penalty():
    rng = np.random.default_rng(1)
    defn = random_ocp(rng, 3, 4, m=2)
    defn.system.B[:] = 0.0
    u = rng.standard_normal((4, 2))
    grad, _ = adjoint_gradient(defn, rng.standard_normal(3), u)
    np.testing.assert_allclose(grad, 2 * defn.step * u @ defn.R.T, rtol=1e-14, atol=1e-16)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    d, n_t, m = rng.integers(1, 7), rng.integers(1, 6), rng.integers(1, 3)
    defn = random_ocp(rng, d, n_t, m)
    ic = 0.5 * rng.standard_normal(d)
    u = 0.5 * rng.standard_normal((n_t, m))
    grad, cost = adjoint_gradient(defn, ic, u)
    fd = fd_gradient(defn, ic, u)
    assert np.linalg.norm(grad - fd) <= 1e-6 * np.linalg.norm(fd)
    assert cost == forward_cost(defn, ic, u)[1]


def test_scalar_lq_matches_dense_kkt():
    defn = scalar_ocp()
    h = defn.step
    sol = pmp_solve(defn, np.array([1.0]), u_init=np.zeros((2, 1)))
    # y1 = 1 + h u0 and y2 does not enter the cost, so J = h(1 + u0^2) + h(y1^2 + u1^2).
    # Stationarity: [[h + h^3, 0], [0, h]] u = [-h^2, 0]
    K = np.array([[h + h ** 3, 0.0], [0.0, h]])
    u_star = np.linalg.solve(K, [-h ** 2, 0.0])
    np.testing.assert_allclose(sol.controls[:, 0], u_star, atol=1e-7)
    zero_cost = forward_cost(defn, np.array([1.0]), np.zeros((2, 1)))[1]
    assert sol.total_cost < zero_cost
    assert sol.converged


def test_solution_invariants():
    rng = np.random.default_rng(5)
    defn = random_ocp(rng, 5, 5, m=2)
    ic = 0.5 * rng.standard_normal(5)
    sol = pmp_solve(defn, ic)
    assert sol.converged and sol.gradient_norm <= 1e-6
    assert np.all(sol.adjoints[-1] == 0.0)
    assert sol.adjoints.shape == (6, 5)
    quad = defn.step * defn.running_cost(sol.trajectory).sum()
    assert abs(quad - sol.total_cost) <= 1e-12 * sol.total_cost
    grad, _ = adjoint_gradient(defn, ic, sol.controls)
    assert np.abs(grad).max() <= 1e-5
    assert np.isclose(np.abs(grad).max(), sol.open_loop_gradient_norm)


@pytest.mark.parametrize("method", ["gn", "bfgs", "gd"])
def test_methods_agree_and_descend(method):
    rng = np.random.default_rng(7)
    defn = random_ocp(rng, 4, 5)
    ic = rng.standard_normal(4)
    sol = pmp_solve(defn, ic, u_init=defn.zero_control(), method=method)
    ref = pmp_solve(defn, ic, tol=1e-9)
    assert sol.converged
    assert abs(sol.total_cost - ref.total_cost) <= 1e-9 * ref.total_cost
    assert np.all(np.diff(sol.history) <= 0.0)


def test_unknown_method():
    defn = scalar_ocp()
    with pytest.raises(InvalidParameterError):
        pmp_solve(defn, np.array([1.0]), method="newton")


def test_warm_start_at_optimum():
    rng = np.random.default_rng(8)
    defn = random_ocp(rng, 4, 5)
    ic = rng.standard_normal(4)
    sol = pmp_solve(defn, ic, tol=1e-9)
    again = pmp_solve(defn, ic, u_init=sol.controls)
    assert again.iterations <= 1


def test_iteration_cap_flags_not_converged():
    rng = np.random.default_rng(9)
    defn = random_ocp(rng, 4, 5)
    sol = pmp_solve(defn, rng.standard_normal(4), u_init=defn.zero_control(), max_iter=1,
                    method="gd")
    assert not sol.converged and sol.iterations == 1


def test_reduced_identity_basis_matches_full():
    rng = np.random.default_rng(10)
    defn = random_ocp(rng, 5, 5)
    ic = rng.standard_normal(5)
    model = build_reduced(defn.system, defn.Q, np.eye(5))
    red = model.ocp(defn.R, defn.T, defn.n_t)
    a = pmp_solve(defn, ic, tol=1e-9)
    b = pmp_solve(red, model.reduce(ic), tol=1e-9)
    assert abs(a.total_cost - b.total_cost) <= 1e-10 * a.total_cost


def test_lq_initial_guess_is_feasible_signal():
    defn = scalar_ocp(a=0.5, T=4.0, n_t=8)
    u0 = lq_initial_guess(defn, np.array([1.0]))
    assert u0.shape == (8, 1)
    assert forward_cost(defn, np.array([1.0]), u0)[1] < forward_cost(
        defn, np.array([1.0]), np.zeros((8, 1)))[1]


def test_warm_start_choice_identical():
    defn = scalar_ocp()
    u = np.array([[0.3], [0.1]])
    assert np.array_equal(warm_start_choice(defn, np.array([1.0]), u, u.copy()), u)


def test_warm_start_choice_rejects_corrupted_control():
    rng = np.random.default_rng(11)
    defn = random_ocp(rng, 4, 5)
    ic = rng.standard_normal(4)
    u_opt = pmp_solve(defn, ic).controls
    out = warm_start_choice(defn, ic, defn.zero_control(), -3 * u_opt)
    assert np.array_equal(out, defn.zero_control())


def test_warm_start_choice_unstable_burgers():
    P = assemble(BurgersConfig(n_side=9, alpha=0.2))
    defn = OcpDefinition(P.system, P.Q, P.R, 50.0, 100)
    ic = np.full(81, 0.05)
    U = np.linalg.qr(np.column_stack([np.ones(81), P.grid, P.grid ** 2]))[0]
    model = build_reduced(P.system, P.Q, U)
    red = pmp_solve(model.ocp(P.R, 50.0, 100), model.reduce(ic))
    zero = defn.zero_control()
    out = warm_start_choice(defn, ic, zero, red.controls)
    assert np.array_equal(out, red.controls)
    assert forward_cost(defn, ic, red.controls)[1] < forward_cost(defn, ic, zero)[1]
