"""Error indicators, Monte-Carlo validation of the projection risk bound, and timing."""
from __future__ import annotations

import hashlib
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidParameterError, NonConvergenceError
from .pmp import OcpDefinition, pmp_solve
from .qbsys import integrate

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# controllers and indicators


class SignalController:
    """Open-loop controller: maps an initial state to a control signal ``(n_t, m)``."""

    def __init__(self, fn, name="signal"):
        self.fn = fn
        self.name = name

    def signal(self, ic):
        return np.asarray(self.fn(ic), dtype=float)


def full_pmp_controller(defn: OcpDefinition, **kw):
    return SignalController(lambda ic: pmp_solve(defn, ic, **kw).controls, "full-pmp")


def reduced_pmp_controller(model, defn: OcpDefinition, **kw):
    """Optimal signal of the reduced problem for the projected initial state."""
    red = model.ocp(defn.R, defn.T, defn.n_t)
    return SignalController(lambda ic: pmp_solve(red, model.reduce(ic), **kw).controls,
                            "reduced-pmp")


def run_full(defn: OcpDefinition, ic, controller):
    """Full-model trajectory and cost under a signal controller or a feedback law.

    A diverging trajectory (Newton failure) has infinite cost and ``None``
    as trajectory.
    """
    try:
        if isinstance(controller, SignalController):
            traj = integrate(defn.system, ic, controller.signal(ic), defn.T, defn.n_t)
        else:
            traj = integrate(defn.system, ic, controller, defn.T, defn.n_t)
    except NonConvergenceError as exc:
        logger.info("full-model run diverged at step %s", exc.step)
        return None, np.inf
    return traj, defn.cost(traj)


@dataclass
class IndicatorReport:
    E_J: float
    E_y: float
    E_TT: float | None = None
    per_sample: list = field(default_factory=list)
    digest: str = ""


def _traj_distance(a, b):
    if a is None or b is None:
        return np.inf
    h = np.diff(a.times)
    return float(np.sum(h * np.linalg.norm(a.states[1:] - b.states[1:], axis=1)))


def indicators(defn: OcpDefinition, reduced, reference, test_ics, tt_law=None, tt_source=None):
    """Cost and trajectory errors of ``reduced`` against ``reference`` on the full model.

    ``E_J = |J(reference) - J(reduced)|`` and
    ``E_y = sum_k (t_k - t_{k-1}) ||y_ref(t_k) - y_red(t_k)||_2``, both
    averaged over ``test_ics``.  With ``tt_law`` and ``tt_source`` (feedback
    laws), ``E_TT = |J(tt_law) - J(tt_source)|`` is averaged as well.
    Controllers are :class:`SignalController` objects or feedback laws.
    """
    ics = [np.asarray(ic, dtype=float) for ic in test_ics]
    if not ics:
        raise InvalidParameterError("need at least one test initial condition")
    rows = []
    for ic in ics:
        t_ref, j_ref = run_full(defn, ic, reference)
        t_red, j_red = run_full(defn, ic, reduced) if reduced is not reference else (t_ref, j_ref)
        row = {"J_ref": j_ref, "J_red": j_red, "E_J": abs(j_ref - j_red) if np.isfinite(j_ref + j_red)
               else np.inf, "E_y": _traj_distance(t_ref, t_red)}
        if tt_law is not None and tt_source is not None:
            _, j_tt = run_full(defn, ic, tt_law)
            _, j_src = run_full(defn, ic, tt_source)
            row.update(J_TT=j_tt, J_src=j_src, E_TT=abs(j_tt - j_src))
        rows.append(row)
    mean = lambda k: float(np.mean([r[k] for r in rows]))
    digest = hashlib.sha256(np.concatenate(ics).tobytes()).hexdigest()[:16]
    return IndicatorReport(mean("E_J"), mean("E_y"), mean("E_TT") if "E_TT" in rows[0] else None,
                           rows, digest)


# ---------------------------------------------------------------------------
# risk bound validation


@dataclass
class LinearTestFamily:
    """Snapshots ``y(t) = expm(t A) y0`` with ``t ~ U[0, T]`` and Gaussian ``y0``.

    ``A`` must be symmetric so the exponential is taken exactly from its
    eigendecomposition.
    """

    A: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        if not np.allclose(self.A, self.A.T):
            raise InvalidParameterError("A must be symmetric")
        self._lam, self._V = np.linalg.eigh(self.A)
        self._L = np.linalg.cholesky(np.asarray(self.cov, dtype=float)
                                     + 1e-15 * np.eye(self.dim)) if np.any(self.cov) else None

    @property
    def dim(self):
        return self.A.shape[0]

    @classmethod
    def default(cls, d=10, T=2.0, noise=0.3, seed=0):
        rng = np.random.default_rng(seed)
        Qm, _ = np.linalg.qr(rng.standard_normal((d, d)))
        A = Qm @ np.diag(-np.linspace(0.1, 2.0, d)) @ Qm.T
        scales = noise * 0.7 ** np.arange(d)
        W, _ = np.linalg.qr(rng.standard_normal((d, d)))
        return cls(0.5 * (A + A.T), np.ones(d), W @ np.diag(scales ** 2) @ W.T, T)

    def sample(self, n, rng):
        t = rng.uniform(0.0, self.T, size=n)
        y0 = np.broadcast_to(self.mean, (n, self.dim)).copy()
        if self._L is not None:
            y0 += rng.standard_normal((n, self.dim)) @ self._L.T
        z = y0 @ self._V
        return (z * np.exp(np.outer(t, self._lam))) @ self._V.T


@dataclass
class RiskBoundReport:
    N: int
    ell: int
    expected_risk: float
    empirical_risk: float
    tail_star: float
    tail: float
    bound_star: float
    bound: float
    C: float
    eigenvalues: np.ndarray
    eigenvalues_star: np.ndarray
    scale: float = 0.0

    @property
    def variance_term(self):
        return self.bound_star - self.tail_star

    @property
    def holds(self):
        # allow round-off relative to trace(G*) so that exact cases compare equal
        slack = 64 * np.finfo(float).eps * self.scale
        return self.expected_risk <= self.bound_star + slack and self.expected_risk <= self.bound + slack


@dataclass
class RiskSweep:
    reports: dict
    oracle_stable: bool

    def hold_fraction(self, N):
        return float(np.mean([r.holds for r in self.reports[N]]))

    def gap(self, N):
        """Mean ``|empirical risk - tail(lambda*)|`` over repetitions."""
        return float(np.mean([abs(r.empirical_risk - r.tail_star) for r in self.reports[N]]))

    def slope(self):
        Ns = sorted(self.reports)
        return float(np.polyfit(np.log(Ns), np.log([self.gap(N) for N in Ns]), 1)[0])


def _sorted_eig(G):
    lam, U = np.linalg.eigh(G)
    return lam[::-1], U[:, ::-1]


def oracle_moments(family, n, rng):
    """``G*`` and ``C = max_jk std(y_j y_k)`` from ``n`` fresh draws."""
    Y = family.sample(n, rng)
    G = Y.T @ Y / n
    prods = Y[:, :, None] * Y[:, None, :]
    C = float(prods.std(axis=0, ddof=1).max()) if n > 1 else 0.0
    return G, C


def risk_report(family, N, ell, G_star, C, rng):
    """One repetition: basis from ``N`` draws, terms of the bound."""
    d = family.dim
    Y = family.sample(N, rng)
    G = Y.T @ Y / N
    lam, U = _sorted_eig(G)
    lam_s, _ = _sorted_eig(G_star)
    U_l = U[:, :ell]
    # tr((I - P) G* (I - P)) without cancelling against tr(G*)
    W = G_star - U_l @ (U_l.T @ G_star)
    W = W - (W @ U_l) @ U_l.T
    expected = float(np.trace(W))
    R = Y - (Y @ U_l) @ U_l.T
    empirical = float(np.mean(np.sum(R * R, axis=1)))
    tail_s = float(lam_s[ell:].sum())
    tail = float(lam[ell:].sum())
    return RiskBoundReport(N, ell, expected, empirical, tail_s, tail,
                           tail_s + 2 * d * ell * C / np.sqrt(N),
                           tail + (d + ell) * d * C / np.sqrt(N), C, lam, lam_s,
                           float(np.trace(G_star)))


def validate_risk_bound(family, N_list, ell, repetitions=100, N_big=None, seed=0):
    """Monte-Carlo check of the projection risk bound.

    For every ``N`` and repetition the basis comes from ``N`` iid draws;
    the expected risk ``E||y - P y||^2`` is evaluated exactly against the
    second-moment matrix ``G*`` of an independent oracle sample of size
    ``N_big`` (default ``100 max(N)``), which is equivalent to averaging
    over those fresh draws.  ``C`` is the largest componentwise standard
    deviation of ``y_j y_k`` on the oracle sample.

    The oracle is re-estimated with ``2 N_big`` draws; a relative change of
    more than 5% in the leading eigenvalue or the tail sum issues a warning
    and clears ``oracle_stable``.
    """
    N_list = [int(N) for N in N_list]
    if not N_list or min(N_list) < 1:
        raise InvalidParameterError("N values must be positive")
    if not 0 <= ell <= family.dim:
        raise InvalidParameterError("ell out of range")
    rng = np.random.default_rng(seed)
    N_big = int(N_big or 100 * max(N_list))
    G_star, C = oracle_moments(family, N_big, rng)
    G_check, _ = oracle_moments(family, 2 * N_big, rng)
    l1, l2 = _sorted_eig(G_star)[0], _sorted_eig(G_check)[0]
    rel = max(abs(l1[0] - l2[0]) / max(l2[0], 1e-300),
              abs(l1[ell:].sum() - l2[ell:].sum()) / max(l2[ell:].sum(), 1e-300)
              if ell < family.dim else 0.0)
    stable = rel <= 0.05
    if not stable:
        warnings.warn(f"oracle eigenvalues changed by {rel:.1%} when doubling N_big",
                      RuntimeWarning)
    reports = {N: [risk_report(family, N, ell, G_star, C, rng) for _ in range(repetitions)]
               for N in N_list}
    return RiskSweep(reports, stable)


# ---------------------------------------------------------------------------
# timing


def timing_harness(laws, states, min_evals=100, warmup=1):
    """Median wall time of one control computation per law.

    Parameters
    ----------
    laws : dict name -> callable(state)
    states : sequence of states, cycled through
    min_evals : int or dict name -> int

    Returns
    -------
    dict name -> median seconds
    """
    states = list(states)
    if not states:
        raise InvalidParameterError("need at least one state")
    out = {}
    for name, law in laws.items():
        n = min_evals.get(name, 100) if isinstance(min_evals, dict) else int(min_evals)
        for i in range(warmup):
            law(states[i % len(states)])
        times = []
        for i in range(n):
            x = states[i % len(states)]
            t0 = time.perf_counter()
            law(x)
            times.append(time.perf_counter() - t0)
        out[name] = float(np.median(times))
    return out
