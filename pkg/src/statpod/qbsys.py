"""Quadratic-bilinear controlled dynamics and implicit Euler time stepping.

The full- and reduced-order models share the form

    E y' = A y + F(y ⊗ y) + B u

where ``F`` is stored as a sparse third-order tensor of triplets acting on
``y_j y_k``.  Time integration is implicit Euler with a Newton solve per step.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
from scipy.sparse.linalg import splu

from .exceptions import ConditioningError, InvalidParameterError, NonConvergenceError

NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50

# below this size operators are held densely; sparse bookkeeping costs more than it saves
DENSE_LIMIT = 96


class QuadraticTensor:
    """Third-order tensor ``F[i, j, k]`` applied to ``y ⊗ y``.

    Stored as coordinate triplets ``(rows, cols1, cols2, values)`` with
    duplicates summed.  ``apply(y)[i] = sum F[i, j, k] y[j] y[k]``.
    """

    def __init__(self, dim, rows, cols1, cols2, values):
        self.dim = int(dim)
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols1 = np.asarray(cols1, dtype=np.int64).ravel()
        cols2 = np.asarray(cols2, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=float).ravel()
        if not (rows.size == cols1.size == cols2.size == values.size):
            raise InvalidParameterError("triplet arrays must have equal length")
        if rows.size and (min(rows.min(), cols1.min(), cols2.min()) < 0
                          or max(rows.max(), cols1.max(), cols2.max()) >= self.dim):
            raise InvalidParameterError("triplet index out of range")
        d = self.dim
        key = (rows * d + cols1) * d + cols2
        uniq, inv = np.unique(key, return_inverse=True)
        vals = np.bincount(inv.ravel(), weights=values, minlength=uniq.size)
        keep = vals != 0.0
        uniq, vals = uniq[keep], vals[keep]
        self.rows = uniq // (d * d)
        self.cols1 = (uniq // d) % d
        self.cols2 = uniq % d
        self.values = vals
        self._dense = None
        self._matrix = None

    @classmethod
    def zeros(cls, dim):
        e = np.zeros(0, dtype=np.int64)
        return cls(dim, e, e, e, np.zeros(0))

    @classmethod
    def from_dense(cls, T, atol=0.0):
        T = np.asarray(T, dtype=float)
        if T.ndim == 2:
            d = T.shape[0]
            T = T.reshape(d, d, d)
        i, j, k = np.nonzero(np.abs(T) > atol)
        out = cls(T.shape[0], i, j, k, T[i, j, k])
        return out

    @property
    def nnz(self):
        return self.values.size

    @property
    def is_dense(self):
        return self.dim <= DENSE_LIMIT

    def to_dense(self):
        """Return the ``(d, d, d)`` array (cached)."""
        if self._dense is None:
            d = self.dim
            T = np.zeros((d, d, d))
            T[self.rows, self.cols1, self.cols2] = self.values
            self._dense = T
        return self._dense

    def to_matrix(self):
        """Return ``F`` as a sparse ``d × d²`` matrix acting on ``kron(y, y)``."""
        if self._matrix is None:
            d = self.dim
            self._matrix = sp.csr_matrix(
                (self.values, (self.rows, self.cols1 * d + self.cols2)), shape=(d, d * d))
        return self._matrix

    def apply(self, y):
        y = np.asarray(y, dtype=float)
        if self.is_dense:
            T = self.to_dense()
            return (T @ y) @ y
        return np.bincount(self.rows, weights=self.values * y[self.cols1] * y[self.cols2],
                           minlength=self.dim)

    def semilinear(self, y):
        """Matrix ``S(y)`` with ``S(y)[i, j] = sum_k F[i, j, k] y[k]``, so ``S(y) y = F(y ⊗ y)``."""
        if self.is_dense:
            return self.to_dense() @ np.asarray(y, dtype=float)
        d = self.dim
        return sp.csr_matrix((self.values * y[self.cols2], (self.rows, self.cols1)), shape=(d, d))

    def jacobian(self, y):
        """Derivative of ``F(y ⊗ y)`` with respect to ``y``."""
        y = np.asarray(y, dtype=float)
        if self.is_dense:
            T = self.to_dense()
            return T @ y + np.einsum("ijk,j->ik", T, y)
        d = self.dim
        data = np.concatenate([self.values * y[self.cols2], self.values * y[self.cols1]])
        return sp.csr_matrix((data, (np.concatenate([self.rows, self.rows]),
                                     np.concatenate([self.cols1, self.cols2]))), shape=(d, d))

    def project(self, U, V=None):
        """Galerkin projection ``V^T F (U ⊗ U)`` (``V`` defaults to ``U``)."""
        U = np.asarray(U, dtype=float)
        V = U if V is None else np.asarray(V, dtype=float)
        d, ell = U.shape
        if self.nnz == 0:
            return QuadraticTensor.zeros(ell)
        G = (self.to_matrix().T @ V).T.reshape(V.shape[1], d, d)  # V^T F, as (l, d, d)
        T = np.einsum("ajk,jb,kc->abc", G, U, U, optimize=True)
        return QuadraticTensor.from_dense(T)

    def __eq__(self, other):
        if not isinstance(other, QuadraticTensor):
            return NotImplemented
        return (self.dim == other.dim and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.cols1, other.cols1)
                and np.array_equal(self.cols2, other.cols2)
                and np.array_equal(self.values, other.values))


def _as_operator(M, dense):
    if dense:
        return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
    return sp.csr_matrix(M)


class _StepSolver:
    """Factorized step Jacobian ``E/h - A - dF(y)``; solves with it and its transpose.

    Sparse matrices with a narrow band (FEM node orderings) go through LAPACK
    banded LU, other sparse matrices through SuperLU, dense ones through getrf.
    """

    def __init__(self, M):
        self._kind = "dense"
        if sp.issparse(M):
            coo = M.tocoo()
            n = M.shape[0]
            off = coo.row - coo.col
            kl = int(max(off.max(), 0)) if off.size else 0
            ku = int(max(-off.min(), 0)) if off.size else 0
            if 4 * (2 * kl + ku + 1) < n:
                ab = np.zeros((2 * kl + ku + 1, n))
                np.add.at(ab, (kl + ku + off, coo.col), coo.data)
                lu, piv, info = sla.lapack.dgbtrf(ab, kl, ku)
                if info > 0:
                    raise ConditioningError("singular step Jacobian")
                self._lu = (lu, piv, kl, ku)
                self._kind = "banded"
            else:
                try:
                    self._lu = splu(sp.csc_matrix(M))
                except RuntimeError as exc:
                    raise ConditioningError(f"singular step Jacobian: {exc}") from exc
                self._kind = "sparse"
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                self._lu = sla.lu_factor(M, check_finite=False)
            if np.min(np.abs(np.diag(self._lu[0]))) == 0.0:
                raise ConditioningError("singular step Jacobian")

    def _solve(self, b, trans):
        if self._kind == "banded":
            lu, piv, kl, ku = self._lu
            x, info = sla.lapack.dgbtrs(lu, kl, ku, b, piv, trans=trans)
            return x
        if self._kind == "sparse":
            return self._lu.solve(b, trans="T" if trans else "N")
        return sla.lu_solve(self._lu, b, trans=trans, check_finite=False)

    def solve(self, b):
        return self._solve(np.asarray(b, dtype=float), 0)

    def solve_transpose(self, b):
        return self._solve(np.asarray(b, dtype=float), 1)


@dataclass(eq=False)
class QuadraticBilinearSystem:
    """Controlled dynamics ``E y' = A y + F(y ⊗ y) + B u``.

    Parameters
    ----------
    E : (d, d) array or sparse matrix
        Mass matrix, symmetric positive definite.
    A : (d, d) array or sparse matrix
        Linear part. For Burgers this already contains ``C + alpha E``.
    F : QuadraticTensor
    B : (d, m) array
    alpha : float
        Instability shift, kept as metadata.
    """

    E: object
    A: object
    F: QuadraticTensor
    B: np.ndarray
    alpha: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        d = self.E.shape[0]
        dense = d <= DENSE_LIMIT
        self.E = _as_operator(self.E, dense)
        self.A = _as_operator(self.A, dense)
        self.B = np.asarray(self.B.toarray() if sp.issparse(self.B) else self.B, dtype=float)
        if self.B.ndim == 1:
            self.B = self.B[:, None]
        if self.E.shape != (d, d) or self.A.shape != (d, d):
            raise InvalidParameterError("E and A must be square of equal size")
        if self.B.shape[0] != d or self.F.dim != d:
            raise InvalidParameterError("B and F must match the state dimension")
        if self.alpha < 0:
            raise InvalidParameterError("alpha must be nonnegative")

    @property
    def dim(self):
        return self.E.shape[0]

    @property
    def control_dim(self):
        return self.B.shape[1]

    @property
    def is_sparse(self):
        return sp.issparse(self.E)

    def rhs(self, y, u):
        """``A y + F(y ⊗ y) + B u`` (the mass-weighted time derivative)."""
        y = np.asarray(y, dtype=float)
        return self.A @ y + self.F.apply(y) + self.B @ np.atleast_1d(u)

    def _base(self, h):
        key = ("base", h)
        if key not in self._cache:
            base = self.E / h - self.A
            if self.is_sparse:
                base = sp.csr_matrix(base)
                # union sparsity pattern of base and dF so the Jacobian is assembled by scatter
                d = self.dim
                F = self.F
                coo = base.tocoo()
                rows = np.concatenate([F.rows, F.rows, coo.row])
                cols = np.concatenate([F.cols1, F.cols2, coo.col])
                uniq, inv = np.unique(rows * d + cols, return_inverse=True)
                inv = inv.ravel()
                nF = F.nnz
                r_u, c_u = uniq // d, uniq % d
                indptr = np.searchsorted(r_u, np.arange(d + 1))
                base = dict(
                    indices=c_u.astype(np.int32), indptr=indptr.astype(np.int32), n=uniq.size,
                    map1=inv[:nF], map2=inv[nF:2 * nF],
                    data=np.bincount(inv[2 * nF:], weights=coo.data, minlength=uniq.size))
            self._cache[key] = base
        return self._cache[key]

    def step_matrix(self, y, h):
        """Newton/step Jacobian ``E/h - A - dF(y)`` at state ``y``."""
        base = self._base(h)
        if not self.is_sparse:
            if self.F.nnz == 0:
                return base.copy()
            return base - self.F.jacobian(y)
        F = self.F
        n = base["n"]
        data = base["data"].copy()
        if F.nnz:
            data -= np.bincount(base["map1"], weights=F.values * y[F.cols2], minlength=n)
            data -= np.bincount(base["map2"], weights=F.values * y[F.cols1], minlength=n)
        return sp.csr_matrix((data, base["indices"], base["indptr"]), shape=(self.dim, self.dim))

    def step_solver(self, y, h):
        return _StepSolver(self.step_matrix(y, h))


class _FeedbackStepSolver:
    """Solves with ``M - B G`` through the factorization of ``M`` (Woodbury)."""

    def __init__(self, base, B, G):
        self.base = base
        self.G = G
        self.W = base.solve(B)  # M^-1 B
        cap = np.eye(G.shape[0]) - G @ self.W
        try:
            self.cap = sla.lu_factor(cap, check_finite=True)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ConditioningError(f"singular feedback capacitance matrix: {exc}") from exc

    def solve(self, b):
        x = self.base.solve(b)
        return x + self.W @ sla.lu_solve(self.cap, self.G @ x)


def step_implicit_euler(sys, y, u, h, tol=NEWTON_TOL, max_iter=NEWTON_MAXITER, gain=None):
    """One implicit Euler step, ``E (y+ - y)/h = A y+ + F(y+ ⊗ y+) + B u``.

    Newton's method is started from ``y``; iteration stops when the residual
    2-norm is at most ``tol * (1 + ||y||)``.

    With ``gain`` (an ``(m, d)`` array ``G``) the control is affine in the new
    state, ``u + G y+``, and enters the implicit solve.

    Raises
    ------
    NonConvergenceError
        If ``max_iter`` Newton iterations do not reach the tolerance.
    """
    if h <= 0:
        raise InvalidParameterError("time step must be positive")
    y = np.asarray(y, dtype=float)
    Ey_h = sys.E @ y / h
    forcing = Ey_h + sys.B @ np.atleast_1d(np.asarray(u, dtype=float))
    thresh = tol * (1.0 + np.linalg.norm(y))
    if gain is None:
        BG = None
        residual = lambda z: sys.E @ z / h - sys.A @ z - sys.F.apply(z) - forcing
    else:
        gain = np.atleast_2d(np.asarray(gain, dtype=float))
        residual = lambda z: (sys.E @ z / h - sys.A @ z - sys.F.apply(z) - forcing
                              - sys.B @ (gain @ z))
    z = y.copy()
    r = residual(z)
    res = np.linalg.norm(r)
    dz = np.inf
    for _ in range(max_iter):
        if not np.isfinite(res):
            break
        # the residual is mass-weighted; also require a round-off sized last update
        # so that costs built on the trajectory are accurate to ~1e-14
        if res <= thresh and (res <= 1e-3 * thresh or dz <= 1e-8 * (1.0 + np.linalg.norm(z))):
            return z
        try:
            solver = sys.step_solver(z, h)
            if gain is not None:
                solver = _FeedbackStepSolver(solver, sys.B, gain)
            step = solver.solve(r)
        except ConditioningError as exc:
            raise NonConvergenceError(f"Newton step failed: {exc}", residual=res) from exc
        # damped Newton: halve the update until the residual decreases
        lam = 1.0
        for _ in range(30):
            z_try = z - lam * step
            r_try = residual(z_try)
            res_try = np.linalg.norm(r_try)
            if res_try < res or res_try <= thresh:
                break
            lam *= 0.5
        dz = lam * np.linalg.norm(step)
        z, r, res = z_try, r_try, res_try
    if res <= thresh:
        return z
    raise NonConvergenceError(
        f"Newton did not converge in {max_iter} iterations (residual {res:.3e})", residual=res)


@dataclass
class Trajectory:
    """States on a uniform grid with piecewise-constant controls.

    ``states`` has shape ``(n_t + 1, d)`` and ``controls`` ``(n_t, m)``;
    ``controls[i]`` acts on ``[t_i, t_{i+1})``.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        if self.states.shape[0] != self.times.size:
            raise InvalidParameterError("one state per time point required")
        if self.controls.shape[0] != self.times.size - 1:
            raise InvalidParameterError("one control per time step required")

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def step(self):
        return self.times[1] - self.times[0]

    def snapshot_columns(self, include_initial=False):
        """States as a ``d × n_t`` column block (``t_1 .. t_{n_t}``)."""
        start = 0 if include_initial else 1
        return self.states[start:].T


def time_grid(T, n_t):
    if T <= 0 or n_t < 1:
        raise InvalidParameterError("need T > 0 and n_t >= 1")
    return np.linspace(0.0, T, n_t + 1)


def integrate(sys, ic, control, T, n_t, feedback="auto"):
    """Integrate with implicit Euler on a uniform grid.

    Parameters
    ----------
    control : array (n_t, m), callable, or FeedbackLaw
        An open-loop signal or a feedback law.  Feedback laws with a
        projection basis are applied to the projected state.
    feedback : {"auto", "explicit", "linearized"}
        ``"explicit"`` holds ``law(y_i)`` over step ``i``.  ``"linearized"``
        applies ``law(y_i) + J_i (y_{i+1} - y_i)`` with the law's Jacobian
        ``J_i`` at ``y_i`` inside the implicit solve, which keeps high-gain
        feedback stable for large steps (exact for linear laws).  The recorded
        control of step ``i`` is the value actually applied.  ``"auto"`` uses
        ``"linearized"`` for objects providing ``jacobian_for`` (such as
        :class:`~statpod.riccati.FeedbackLaw`) and ``"explicit"`` otherwise.

    Raises
    ------
    NonConvergenceError
        With ``step`` set to the failing step index.
    """
    times = time_grid(T, n_t)
    h = T / n_t
    m = sys.control_dim
    if feedback not in ("auto", "explicit", "linearized"):
        raise InvalidParameterError(f"unknown feedback mode {feedback!r}")
    is_law = callable(control)
    if is_law:
        evaluate = getattr(control, "control_for", control)
        if feedback == "auto":
            feedback = "linearized" if hasattr(control, "jacobian_for") else "explicit"
        if feedback == "linearized" and not hasattr(control, "jacobian_for"):
            raise InvalidParameterError("linearized feedback needs a law with jacobian_for")
        controls = np.zeros((n_t, m))
    else:
        controls = np.asarray(control, dtype=float).reshape(n_t, m)
    states = np.empty((n_t + 1, sys.dim))
    states[0] = np.asarray(ic, dtype=float)
    for i in range(n_t):
        y = states[i]
        try:
            if is_law and feedback == "linearized":
                G = np.atleast_2d(control.jacobian_for(y))
                u0 = np.atleast_1d(evaluate(y)) - G @ y
                states[i + 1] = step_implicit_euler(sys, y, u0, h, gain=G)
                controls[i] = u0 + G @ states[i + 1]
                continue
            if is_law:
                controls[i] = np.atleast_1d(evaluate(y))
            states[i + 1] = step_implicit_euler(sys, y, controls[i], h)
        except NonConvergenceError as exc:
            exc.step = i
            raise
    return Trajectory(times, states, controls)


@dataclass
class RandomFieldIC:
    """Random cosine field ``y0 + sum (i+j)^-gamma mu_ij cos(i pi x) cos(j pi y)``.

    ``mean`` may be a scalar, a nodal array, or a callable of the ``(d, 2)``
    grid.  ``mu_ij ~ N(0, sigma^2)``, drawn in the order ``i + (j-1) M1``.
    """

    mean: Union[float, np.ndarray, Callable] = 0.05
    M1: int = 8
    M2: int = 8
    gamma: float = 4.0
    sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 0:
            raise InvalidParameterError("gamma must be positive")
        if self.sigma < 0:
            raise InvalidParameterError("sigma must be nonnegative")
        if self.M1 < 1 or self.M2 < 1:
            raise InvalidParameterError("M1 and M2 must be positive")

    def coefficients(self, seed=None):
        rng = np.random.default_rng(self.seed if seed is None else seed)
        return self.sigma * rng.standard_normal(self.M1 * self.M2)

    def mean_field(self, grid):
        grid = np.asarray(grid, dtype=float)
        if callable(self.mean):
            return np.asarray(self.mean(grid), dtype=float)
        return np.broadcast_to(np.asarray(self.mean, dtype=float), (grid.shape[0],)).copy()

    def sample(self, grid, seed=None):
        return sample_initial_condition(self, grid, seed=seed)


def sample_initial_condition(rf, grid, seed=None):
    """Evaluate one realization of ``rf`` at the ``(d, 2)`` grid nodes."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2 or grid.shape[1] != 2:
        raise InvalidParameterError("grid must have shape (d, 2)")
    if np.any(grid < 0) or np.any(grid > 1):
        raise InvalidParameterError("grid nodes must lie in [0, 1]^2")
    y = rf.mean_field(grid)
    if rf.sigma == 0:
        return y
    mu = rf.coefficients(seed).reshape(rf.M2, rf.M1)  # [j-1, i-1]
    i = np.arange(1, rf.M1 + 1)
    j = np.arange(1, rf.M2 + 1)
    weights = (i[None, :] + j[:, None]) ** (-float(rf.gamma)) * mu
    c1 = np.cos(np.pi * np.outer(grid[:, 0], i))  # (d, M1)
    c2 = np.cos(np.pi * np.outer(grid[:, 1], j))  # (d, M2)
    return y + np.einsum("ni,nj,ji->n", c1, c2, weights)
