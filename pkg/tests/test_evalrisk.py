import numpy as np
import pytest

from instances import random_ocp
from statpod.evalrisk import (LinearTestFamily, SignalController, full_pmp_controller,
                              indicators, reduced_pmp_controller, risk_report, run_full,
                              timing_harness, validate_risk_bound)
from statpod.exceptions import InvalidParameterError
from statpod.pmp import OcpDefinition, pmp_solve
from statpod.qbsys import QuadraticBilinearSystem, QuadraticTensor
from statpod.riccati import FeedbackLaw, SemilinearForm, lqr_law
from statpod.spod import build_reduced


@pytest.fixture(scope="module")
def ocp():
    return random_ocp(np.random.default_rng(0), 5, 5)


def test_identical_laws_give_zero(ocp):
    ics = [np.random.default_rng(s).standard_normal(5) for s in range(3)]
    ref = full_pmp_controller(ocp)
    rep = indicators(ocp, ref, ref, ics)
    assert rep.E_J == 0.0 and rep.E_y == 0.0 and rep.E_TT is None
    assert len(rep.per_sample) == 3 and len(rep.digest) == 16


def test_identity_basis_reduction(ocp):
    ics = [np.random.default_rng(s).standard_normal(5) for s in range(2)]
    model = build_reduced(ocp.system, ocp.Q, np.eye(5))
    rep = indicators(ocp, reduced_pmp_controller(model, ocp, tol=1e-9),
                     full_pmp_controller(ocp, tol=1e-9), ics)
    assert rep.E_J <= 1e-8


def test_indicator_symmetry_and_definition(ocp):
    rng = np.random.default_rng(1)
    ics = [rng.standard_normal(5) for _ in range(2)]
    a = SignalController(lambda ic: np.zeros((5, 1)))
    b = SignalController(lambda ic: 0.1 * np.ones((5, 1)))
    ab, ba = indicators(ocp, a, b, ics), indicators(ocp, b, a, ics)
    assert ab.E_J == ba.E_J and ab.E_y == ba.E_y and ab.E_J > 0
    ta, ja = run_full(ocp, ics[0], a)
    tb, jb = run_full(ocp, ics[0], b)
    h = ocp.step
    Ey = sum(h * np.linalg.norm(ta.states[k] - tb.states[k]) for k in range(1, 6))
    assert ab.per_sample[0]["E_y"] == pytest.approx(Ey, rel=1e-14)
    assert ab.per_sample[0]["E_J"] == pytest.approx(abs(ja - jb), rel=1e-14)


def test_tt_indicator(ocp):
    form = SemilinearForm.from_system(ocp.system, ocp.Q, ocp.R)
    law = lqr_law(form)
    shifted = FeedbackLaw("TT", lambda x: law(x) + 0.01)
    rep = indicators(ocp, law, law, [np.ones(5)], tt_law=shifted, tt_source=law)
    assert rep.E_TT > 0 and rep.E_J == 0.0


def test_diverging_run_is_infinite():
    sys = QuadraticBilinearSystem(np.eye(1), np.zeros((1, 1)), QuadraticTensor(1, [0], [0], [0], [1.0]),
                                  np.ones((1, 1)))
    defn = OcpDefinition(sys, np.eye(1), np.eye(1), 10.0, 10)
    traj, cost = run_full(defn, np.array([0.5]), SignalController(lambda ic: np.zeros((10, 1))))
    assert traj is None and cost == np.inf


def test_no_test_samples(ocp):
    ref = full_pmp_controller(ocp)
    with pytest.raises(InvalidParameterError):
        indicators(ocp, ref, ref, [])


def test_zero_variance_family():
    fam = LinearTestFamily(np.zeros((4, 4)), np.array([1.0, 2.0, 0.0, 0.0]), np.zeros((4, 4)))
    sweep = validate_risk_bound(fam, [5, 20], ell=1, repetitions=3)
    for reps in sweep.reports.values():
        for r in reps:
            assert r.C == 0.0 and r.variance_term == 0.0
            assert abs(r.empirical_risk - r.tail) <= 1e-14
            assert abs(r.expected_risk) <= 1e-14 and r.holds


def test_report_terms():
    fam = LinearTestFamily.default(d=8)
    rng = np.random.default_rng(2)
    Y = fam.sample(20000, rng)
    G = Y.T @ Y / Y.shape[0]
    r = risk_report(fam, 40, 3, G, 0.5, rng)
    assert np.all(np.diff(r.eigenvalues) <= 1e-15) and np.all(np.diff(r.eigenvalues_star) <= 1e-15)
    assert r.tail_star >= 0 and r.tail >= 0 and r.variance_term >= 0
    assert r.bound_star >= r.tail_star
    assert r.bound == pytest.approx(r.tail + (8 + 3) * 8 * 0.5 / np.sqrt(40))
    assert r.expected_risk >= r.tail_star - 1e-12  # the optimal rank-3 subspace minimizes the risk


def test_family_sampling_matches_exponential():
    fam = LinearTestFamily.default(d=5, noise=0.0)
    Y = fam.sample(3, np.random.default_rng(3))
    from scipy.linalg import expm
    rng = np.random.default_rng(3)
    t = rng.uniform(0, fam.T, 3)
    ref = np.array([expm(ti * fam.A) @ fam.mean for ti in t])
    np.testing.assert_allclose(Y, ref, atol=1e-12)


def test_family_requires_symmetric_matrix():
    with pytest.raises(InvalidParameterError):
        LinearTestFamily(np.array([[0.0, 1.0], [0.0, 0.0]]), np.zeros(2), np.eye(2))


def test_risk_sweep_small():
    fam = LinearTestFamily.default(d=10)
    sweep = validate_risk_bound(fam, [10, 40], ell=3, repetitions=20, seed=4)
    assert sweep.oracle_stable
    assert sweep.hold_fraction(10) >= 0.95 and sweep.hold_fraction(40) >= 0.95
    assert sweep.gap(40) < sweep.gap(10)


def test_risk_argument_checks():
    fam = LinearTestFamily.default(d=4)
    with pytest.raises(InvalidParameterError):
        validate_risk_bound(fam, [0], ell=1)
    with pytest.raises(InvalidParameterError):
        validate_risk_bound(fam, [10], ell=5)


def test_timing_harness_repeatable():
    M = np.random.default_rng(5).standard_normal((30, 30))
    laws = {"mat": lambda x: M @ x, "solve": lambda x: np.linalg.solve(M, x)}
    states = [np.ones(30), np.arange(30.0)]
    a = timing_harness(laws, states, min_evals=200)
    b = timing_harness(laws, states, min_evals={"mat": 200, "solve": 150})
    assert set(a) == {"mat", "solve"}
    for k in a:
        assert a[k] > 0 and 1 / 3 <= a[k] / b[k] <= 3
    with pytest.raises(InvalidParameterError):
        timing_harness(laws, [])
