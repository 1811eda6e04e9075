"""Statistical POD: snapshot collection, basis extraction and Galerkin reduction."""
from __future__ import annotations

import hashlib
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import (InvalidBasisError, InvalidParameterError, NonConvergenceError,
                         SampleFailure, StatPodError)
from .pmp import OcpDefinition, lq_initial_guess, pmp_solve, warm_start_choice
from .qbsys import QuadraticBilinearSystem, integrate

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-10


@dataclass
class SnapshotMatrix:
    """Columns ``y(t_1), ..., y(t_{n_t})`` of each trajectory, trajectory-major.

    ``provenance[c] = (sample index, time index, seed)`` for column ``c``.
    """

    data: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise InvalidParameterError("snapshot data must be a 2-D array")
        if self.provenance and len(self.provenance) != self.data.shape[1]:
            raise InvalidParameterError("provenance length must match the column count")

    @classmethod
    def empty(cls, dim):
        return cls(np.zeros((dim, 0)), [])

    @property
    def dim(self):
        return self.data.shape[0]

    @property
    def n_columns(self):
        return self.data.shape[1]

    def append(self, trajectory, sample_index, seed=None):
        cols = trajectory.snapshot_columns()
        self.data = np.hstack([self.data, cols])
        self.provenance.extend((sample_index, t, seed) for t in range(1, cols.shape[1] + 1))

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.data).tobytes()).hexdigest()[:16]


def _fix_signs(U):
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def svd_basis(data):
    """Left singular vectors (sign-normalized) and singular values of ``data``.

    Each vector's entry of largest magnitude is made positive.
    """
    U, s, _ = np.linalg.svd(np.asarray(data, dtype=float), full_matrices=False)
    return _fix_signs(U), s


def tail_energy(singular_values):
    """``tail[l] = sum_{i>l} s_i^2 / sum_i s_i^2`` for ``l = 0 .. len(s)``."""
    s2 = np.asarray(singular_values, dtype=float) ** 2
    total = s2.sum()
    if total == 0:
        return np.zeros(s2.size + 1)
    tail = np.concatenate([np.cumsum(s2[::-1])[::-1], [0.0]])
    return tail / total


def truncation_rank(singular_values, eps):
    """Smallest ``l`` whose discarded energy fraction is below ``eps**2``.

    An all-zero spectrum gives ``0`` and a warning.
    """
    if not 0 < eps <= 1:
        raise InvalidParameterError("eps must lie in (0, 1]")
    s = np.asarray(singular_values, dtype=float)
    if s.size == 0:
        raise InvalidParameterError("need at least one singular value")
    if not np.any(s > 0):
        warnings.warn("all singular values are zero; returning rank 0", RuntimeWarning)
        return 0
    tail = tail_energy(s)
    return int(np.flatnonzero((tail < eps ** 2) | (tail == 0))[0])


@dataclass
class ReducedModel:
    """Galerkin-projected quadratic-bilinear model on an orthonormal basis."""

    basis: np.ndarray
    E: np.ndarray
    A: np.ndarray
    F: object
    B: np.ndarray
    Q: np.ndarray
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    source: str = ""
    alpha: float = 0.0

    @property
    def dim(self):
        return self.basis.shape[1]

    @property
    def system(self) -> QuadraticBilinearSystem:
        sys = getattr(self, "_system", None)
        if sys is None:
            sys = QuadraticBilinearSystem(self.E, self.A, self.F, self.B, self.alpha)
            self._system = sys
        return sys

    def reduce(self, y):
        """Coordinates ``U^T y`` (works column-wise on 2-D input)."""
        return self.basis.T @ np.asarray(y, dtype=float)

    def lift(self, x):
        return self.basis @ np.asarray(x, dtype=float)

    def ocp(self, R, T, n_t):
        return OcpDefinition(self.system, self.Q, R, T, n_t)

    def semilinear_form(self, R):
        from .riccati import SemilinearForm
        return SemilinearForm.from_system(self.system, self.Q, R)


def check_orthonormal(U, tol=ORTHO_TOL):
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or U.shape[1] > U.shape[0]:
        raise InvalidBasisError("basis must be a tall d x l matrix")
    err = np.linalg.norm(U.T @ U - np.eye(U.shape[1]))
    if err > tol:
        raise InvalidBasisError(f"basis is not orthonormal (||U^T U - I||_F = {err:.2e})")
    return U


def build_reduced(sys: QuadraticBilinearSystem, Q, basis, singular_values=None, source=""):
    """Project ``E, A, F, B`` and the state weight ``Q`` onto ``basis``."""
    U = check_orthonormal(basis)
    Qd = Q.toarray() if sp.issparse(Q) else np.asarray(Q, dtype=float)
    sym = lambda M: 0.5 * (M + M.T)
    return ReducedModel(
        basis=U,
        E=sym(np.asarray(U.T @ (sys.E @ U))),
        A=np.asarray(U.T @ (sys.A @ U)),
        F=sys.F.project(U),
        B=U.T @ sys.B,
        Q=sym(U.T @ Qd @ U),
        singular_values=np.zeros(0) if singular_values is None else np.asarray(singular_values),
        source=source,
        alpha=sys.alpha,
    )


def _problem_parts(problem, T, n_t):
    cfg = getattr(problem, "config", None)
    T = T if T is not None else cfg.T
    n_t = n_t if n_t is not None else cfg.n_t
    return OcpDefinition(problem.system, problem.Q, problem.R, T, n_t)


def solve_sample(problem, controller, ic, T=None, n_t=None, defn=None, u_init=None, **pmp_kw):
    """Controlled trajectory from ``ic``.

    ``controller`` is ``"pmp"``, ``"none"`` (uncontrolled), or a
    :class:`~statpod.riccati.FeedbackLaw` acting on the full state.
    """
    defn = defn or _problem_parts(problem, T, n_t)
    if controller == "pmp":
        return pmp_solve(defn, ic, u_init=u_init, **pmp_kw).trajectory
    if controller == "none":
        return integrate(defn.system, ic, defn.zero_control(), defn.T, defn.n_t)
    if callable(controller):
        return integrate(defn.system, ic, controller, defn.T, defn.n_t)
    raise InvalidParameterError(f"unknown controller {controller!r}")


def collect_snapshots(problem, controller="pmp", N=1, seeds=None, T=None, n_t=None, **pmp_kw):
    """Stack the controlled trajectories of ``N`` sampled initial conditions.

    ``seeds`` defaults to ``0 .. N-1``.  Any failing realization aborts with
    :class:`SampleFailure` carrying its index.
    """
    if N < 1:
        raise InvalidParameterError("N must be at least 1")
    seeds = list(range(N)) if seeds is None else list(seeds)
    if len(seeds) != N:
        raise InvalidParameterError("need one seed per sample")
    defn = _problem_parts(problem, T, n_t)
    snaps = SnapshotMatrix.empty(defn.system.dim)
    for i, seed in enumerate(seeds):
        ic = problem.initial_condition(seed=seed)
        try:
            traj = solve_sample(problem, controller, ic, defn=defn, **pmp_kw)
        except StatPodError as exc:
            raise SampleFailure(f"sample {i} (seed {seed}) failed: {exc}", i) from exc
        snaps.append(traj, i, seed)
    return snaps


def _basis_from(snaps, eps=None, ell=None):
    U, s = svd_basis(snaps.data)
    if ell is None:
        ell = truncation_rank(s, eps)
    ell = min(int(ell), U.shape[1])
    return U[:, :ell], s


@dataclass
class OfflineReport:
    mode: str
    sample_times: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    warm_started: list = field(default_factory=list)

    @property
    def cumulative_times(self):
        return np.cumsum(self.sample_times)

    @property
    def total_time(self):
        return float(np.sum(self.sample_times))


def offline_stage(problem, N, eps=None, ell=None, mode="plain", seeds=None, T=None, n_t=None,
                  **pmp_kw):
    """Offline stage of the statistical POD.

    ``mode="plain"`` solves every sample from the default guess and takes one
    SVD at the end.  ``mode="optimized"`` recomputes the basis after every
    sample, solves the reduced problem for the next sample, and starts the
    full solve from the cheaper of the default guess and the reduced optimum.

    Give either ``eps`` (energy threshold) or ``ell`` (fixed rank); the same
    rule is used for the intermediate bases.

    Returns
    -------
    model : ReducedModel
    report : OfflineReport
        Per-sample wall times, iteration counts and warm-start choices.
    """
    if (eps is None) == (ell is None):
        raise InvalidParameterError("give exactly one of eps and ell")
    if mode not in ("plain", "optimized"):
        raise InvalidParameterError(f"unknown mode {mode!r}")
    seeds = list(range(N)) if seeds is None else list(seeds)
    if len(seeds) != N or N < 1:
        raise InvalidParameterError("need N >= 1 and one seed per sample")
    defn = _problem_parts(problem, T, n_t)
    snaps = SnapshotMatrix.empty(defn.system.dim)
    report = OfflineReport(mode)
    for i, seed in enumerate(seeds):
        ic = problem.initial_condition(seed=seed)
        t0 = time.perf_counter()
        try:
            u_init, warm = None, False
            if mode == "optimized" and i > 0:
                U, _ = _basis_from(snaps, eps, ell)
                red = build_reduced(defn.system, defn.Q, U)
                red_defn = red.ocp(defn.R, defn.T, defn.n_t)
                u_red = pmp_solve(red_defn, red.reduce(ic), **pmp_kw).controls
                u_default = lq_initial_guess(defn, ic)
                u_init = warm_start_choice(defn, ic, u_default, u_red)
                warm = u_init is not u_default and not np.array_equal(u_init, u_default)
            sol = pmp_solve(defn, ic, u_init=u_init, **pmp_kw)
        except (StatPodError, NonConvergenceError) as exc:
            raise SampleFailure(f"sample {i} (seed {seed}) failed: {exc}", i) from exc
        report.sample_times.append(time.perf_counter() - t0)
        report.iterations.append(sol.iterations)
        report.warm_started.append(bool(warm))
        snaps.append(sol.trajectory, i, seed)
    U, s = _basis_from(snaps, eps, ell)
    model = build_reduced(defn.system, defn.Q, U, singular_values=s, source=snaps.digest())
    model.snapshots = snaps
    return model, report


def principal_angles(U, V):
    """Principal angles (radians, ascending) between the column spans of ``U`` and ``V``."""
    Qu, _ = np.linalg.qr(U)
    Qv, _ = np.linalg.qr(V)
    c = np.linalg.svd(Qu.T @ Qv, compute_uv=False)
    # small angles are resolved more accurately through the sine
    s = np.linalg.svd(Qv - Qu @ (Qu.T @ Qv), compute_uv=False)
    ang = np.arcsin(np.clip(np.sort(s), 0.0, 1.0))
    big = np.arccos(np.clip(np.sort(c)[::-1], 0.0, 1.0))
    return np.where(ang < np.pi / 4, ang, big)


class StatisticalPOD(TransformerMixin, BaseEstimator):
    """POD basis as a scikit-learn transformer.

    Samples are rows (``n_samples x d``), the transpose of a snapshot
    matrix.

    Parameters
    ----------
    n_components : int, optional
        Fixed rank.  Takes precedence over ``eps``.
    eps : float
        Energy threshold; the rank is the smallest with discarded energy
        fraction below ``eps**2``.

    Attributes
    ----------
    components_ : (n_components_, d) array
    singular_values_ : array
    n_components_ : int
    """

    def __init__(self, n_components=None, eps=1e-3):
        self.n_components = n_components
        self.eps = eps

    def fit(self, X, y=None):
        X = check_array(X)
        U, s = svd_basis(X.T)
        if self.n_components is not None:
            if not 0 <= self.n_components <= U.shape[1]:
                raise InvalidParameterError("n_components out of range")
            ell = int(self.n_components)
        else:
            ell = truncation_rank(s, self.eps)
        self.components_ = U[:, :ell].T
        self.singular_values_ = s
        self.n_components_ = ell
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        return check_array(X) @ self.components_.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        return np.asarray(Z, dtype=float) @ self.components_

    def empirical_risk(self, X):
        """Mean squared projection error over the rows of ``X``."""
        X = check_array(X)
        R = X - self.inverse_transform(self.transform(X))
        return float(np.mean(np.sum(R * R, axis=1)))
