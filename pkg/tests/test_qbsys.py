import numpy as np
import pytest
from scipy.optimize import bisect

from statpod.exceptions import InvalidParameterError, NonConvergenceError
from statpod.qbsys import (QuadraticBilinearSystem, QuadraticTensor, RandomFieldIC,
                           integrate, sample_initial_condition, step_implicit_euler)


def scalar_system(a=0.0, f=0.0, b=1.0):
    F = QuadraticTensor(1, [0], [0], [0], [f]) if f else QuadraticTensor.zeros(1)
    return QuadraticBilinearSystem(np.eye(1), np.array([[a]]), F, np.array([[b]]))


def random_tensor(d, rng, density=0.5):
    T = rng.standard_normal((d, d, d)) * (rng.random((d, d, d)) < density)
    return T, QuadraticTensor.from_dense(T)


def test_tensor_duplicates_are_summed():
    F = QuadraticTensor(2, [0, 0, 1], [1, 1, 0], [0, 0, 1], [1.0, 2.0, -1.0])
    assert F.nnz == 2
    np.testing.assert_allclose(F.apply(np.array([2.0, 3.0])), [18.0, -6.0])


def test_tensor_out_of_range_index():
    with pytest.raises(InvalidParameterError):
        QuadraticTensor(2, [0], [2], [0], [1.0])


@pytest.mark.parametrize("d", [5, 120])
def test_tensor_operations_match_dense(d):
    rng = np.random.default_rng(d)
    T = np.zeros((d, d, d))
    idx = rng.integers(0, d, size=(4 * d, 3))
    T[idx[:, 0], idx[:, 1], idx[:, 2]] = rng.standard_normal(4 * d)
    F = QuadraticTensor.from_dense(T)
    y = rng.standard_normal(d)
    ref = np.einsum("ijk,j,k->i", T, y, y)
    np.testing.assert_allclose(F.apply(y), ref, rtol=1e-12, atol=1e-12)
    S = F.semilinear(y)
    np.testing.assert_allclose(S @ y, ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(F.to_matrix() @ np.kron(y, y), ref, rtol=1e-12, atol=1e-12)
    J = F.jacobian(y)
    J = J.toarray() if hasattr(J, "toarray") else J
    eps = 1e-6
    fd = np.column_stack([(F.apply(y + eps * e) - F.apply(y - eps * e)) / (2 * eps)
                          for e in np.eye(d)])
    np.testing.assert_allclose(J, fd, atol=1e-7)


def test_tensor_projection():
    rng = np.random.default_rng(1)
    T, F = random_tensor(6, rng)
    U, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    Fr = F.project(U)
    z = rng.standard_normal(3)
    np.testing.assert_allclose(Fr.apply(z), U.T @ F.apply(U @ z), atol=1e-12)


def test_linear_step_matches_resolvent():
    rng = np.random.default_rng(0)
    d = 8
    M = rng.standard_normal((d, d))
    E = M @ M.T + d * np.eye(d)
    A = rng.standard_normal((d, d)) - 3 * np.eye(d)
    sys = QuadraticBilinearSystem(E, A, QuadraticTensor.zeros(d), np.zeros((d, 1)))
    y = rng.standard_normal(d)
    h = 0.3
    ref = np.linalg.solve(E / h - A, E @ y / h)
    out = step_implicit_euler(sys, y, 0.0, h)
    assert np.linalg.norm(out - ref) <= 1e-12 * np.linalg.norm(ref)


def test_equilibrium_preserved():
    rng = np.random.default_rng(2)
    _, F = random_tensor(4, rng)
    sys = QuadraticBilinearSystem(np.eye(4), -np.eye(4), F, np.ones((4, 1)))
    np.testing.assert_array_equal(step_implicit_euler(sys, np.zeros(4), 0.0, 0.1), 0.0)


def test_scalar_newton_against_bisection():
    sys = scalar_system(f=-1.0, b=0.0)
    out = step_implicit_euler(sys, np.array([1.0]), 0.0, 0.1)
    root = bisect(lambda z: (z - 1.0) / 0.1 + z * z, 0.0, 1.0, xtol=1e-15, rtol=1e-15)
    assert abs(out[0] - root) <= 1e-12


def test_newton_failure_raises_with_residual():
    # (z - y)/h = z^2 has no real root when 4 h y > 1
    sys = scalar_system(f=1.0, b=0.0)
    with pytest.raises(NonConvergenceError) as info:
        step_implicit_euler(sys, np.array([10.0]), 0.0, 1.0)
    assert info.value.residual > 0


def test_integrate_reports_failing_step():
    sys = scalar_system(f=1.0, b=0.0)
    with pytest.raises(NonConvergenceError) as info:
        integrate(sys, np.array([0.2]), np.zeros((10, 1)), 10.0, 10)
    assert info.value.step is not None and 0 <= info.value.step < 10


def test_nonpositive_step_rejected():
    with pytest.raises(InvalidParameterError):
        step_implicit_euler(scalar_system(), np.array([1.0]), 0.0, 0.0)


def test_integrate_zero_state_stays_zero():
    sys = QuadraticBilinearSystem(np.eye(3), -np.eye(3),
                                  QuadraticTensor.from_dense(np.ones((3, 3, 3))), np.ones((3, 1)))
    traj = integrate(sys, np.zeros(3), np.zeros((5, 1)), 1.0, 5)
    np.testing.assert_array_equal(traj.states, 0.0)


def test_integrate_scalar_decay():
    traj = integrate(scalar_system(a=-1.0), np.array([1.0]), np.zeros((2, 1)), 1.0, 2)
    np.testing.assert_allclose(traj.states[:, 0], [1.0, 1 / 1.5, 1 / 1.5 ** 2], rtol=1e-14)
    assert traj.states.shape[0] == traj.times.size == traj.controls.shape[0] + 1


def test_integrate_feedback_left_endpoint():
    seen = []

    def law(y):
        seen.append(y.copy())
        return -y

    traj = integrate(scalar_system(), np.array([1.0]), law, 1.0, 2)
    np.testing.assert_allclose(np.array(seen)[:, 0], traj.states[:-1, 0])
    np.testing.assert_allclose(traj.controls[:, 0], -traj.states[:-1, 0])


def test_integrate_linearized_feedback_is_implicit_closed_loop():
    from statpod.riccati import FeedbackLaw
    rng = np.random.default_rng(5)
    _, F = random_tensor(4, rng)
    B = rng.standard_normal((4, 1))
    K = rng.standard_normal((1, 4))
    A = -np.eye(4)
    open_loop = QuadraticBilinearSystem(np.eye(4), A, F, B)
    closed = QuadraticBilinearSystem(np.eye(4), A - B @ K, F, np.zeros((4, 1)))
    law = FeedbackLaw("linear", lambda y: -(K @ y), metadata={"jacobian": lambda y: -K})
    y0 = 0.1 * rng.standard_normal(4)
    a = integrate(open_loop, y0, law, 2.0, 8)
    b = integrate(closed, y0, np.zeros((8, 1)), 2.0, 8)
    np.testing.assert_allclose(a.states, b.states, atol=1e-12)
    # the applied control is the law at the new state
    np.testing.assert_allclose(a.controls, -(a.states[1:] @ K.T), atol=1e-12)


def test_integrate_linearized_feedback_stiff_gain():
    # gain far above 1/h: an explicit hold oscillates, the implicit coupling decays
    from statpod.riccati import FeedbackLaw
    law = FeedbackLaw("linear", lambda y: -10.0 * y, metadata={"jacobian": lambda y: -10.0 * np.eye(1)})
    lin = integrate(scalar_system(), np.array([1.0]), law, 2.0, 4)
    np.testing.assert_allclose(lin.states[:, 0], (1 / 6) ** np.arange(5), rtol=1e-13)
    exp = integrate(scalar_system(), np.array([1.0]), law, 2.0, 4, feedback="explicit")
    np.testing.assert_allclose(exp.states[:, 0], (-4.0) ** np.arange(5), rtol=1e-13)


def test_integrate_is_deterministic():
    rng = np.random.default_rng(3)
    _, F = random_tensor(5, rng)
    sys = QuadraticBilinearSystem(np.eye(5), -2 * np.eye(5), F, np.ones((5, 1)))
    y0 = 0.1 * rng.standard_normal(5)
    u = 0.1 * rng.standard_normal((8, 1))
    a = integrate(sys, y0, u, 2.0, 8)
    b = integrate(sys, y0, u, 2.0, 8)
    assert np.array_equal(a.states, b.states)


GRID = np.array([[x, y] for y in np.linspace(0, 1, 9) for x in np.linspace(0, 1, 9)])


def test_random_field_zero_variance_is_mean():
    y = sample_initial_condition(RandomFieldIC(mean=0.05, sigma=0.0), GRID)
    np.testing.assert_array_equal(y, 0.05)


def test_random_field_equal_seeds():
    a = RandomFieldIC(seed=7).sample(GRID)
    b = RandomFieldIC(seed=7).sample(GRID)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, RandomFieldIC(seed=8).sample(GRID))


def test_random_field_value_at_origin():
    rf = RandomFieldIC(mean=0.05, M1=8, M2=8, gamma=4.0, sigma=0.05, seed=11)
    mu = rf.coefficients()
    total = 0.05
    for j in range(1, 9):
        for i in range(1, 9):
            total += (i + j) ** -4.0 * mu[i - 1 + (j - 1) * 8]
    y = rf.sample(GRID)
    assert abs(y[0] - total) <= 1e-15


def test_random_field_coefficient_ordering():
    # a field along xi_1 only: M2 = 1, so mode i carries mu[i-1]
    rf = RandomFieldIC(mean=0.0, M1=3, M2=1, gamma=1.0, sigma=1.0, seed=0)
    mu = rf.coefficients()
    pts = np.array([[0.3, 0.6]])
    ref = sum(mu[i - 1] / (i + 1) * np.cos(i * np.pi * 0.3) * np.cos(np.pi * 0.6)
              for i in range(1, 4))
    assert abs(rf.sample(pts)[0] - ref) <= 1e-14


def test_random_field_rougher_for_smaller_gamma():
    fine = np.array([[x, y] for y in np.linspace(0, 1, 65) for x in np.linspace(0, 1, 65)])
    for seed in range(5):
        dev3 = RandomFieldIC(gamma=3.0, seed=seed).sample(fine) - 0.05
        dev4 = RandomFieldIC(gamma=4.0, seed=seed).sample(fine) - 0.05
        assert np.mean(dev3 ** 2) > np.mean(dev4 ** 2)


@pytest.mark.parametrize("kw", [dict(gamma=0.0), dict(gamma=-1.0), dict(sigma=-0.1)])
def test_random_field_invalid(kw):
    with pytest.raises(InvalidParameterError):
        RandomFieldIC(**kw)


def test_random_field_grid_outside_square():
    with pytest.raises(InvalidParameterError):
        sample_initial_condition(RandomFieldIC(), np.array([[1.5, 0.0]]))


def test_system_dimension_checks():
    with pytest.raises(InvalidParameterError):
        QuadraticBilinearSystem(np.eye(2), np.eye(3), QuadraticTensor.zeros(2), np.ones((2, 1)))
    with pytest.raises(InvalidParameterError):
        QuadraticBilinearSystem(np.eye(2), np.eye(2), QuadraticTensor.zeros(3), np.ones((2, 1)))
    with pytest.raises(InvalidParameterError):
        QuadraticBilinearSystem(np.eye(2), np.eye(2), QuadraticTensor.zeros(2), np.ones((2, 1)),
                                alpha=-1.0)
