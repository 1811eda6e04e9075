"""Algebraic Riccati equations and LQR / SDRE feedback laws."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .exceptions import (DetectabilityError, InvalidParameterError, RiccatiFailure,
                         StatPodError, UnstabilizableError)

ARE_RTOL = 1e-9
NK_MAX_PASSES = 8
FD_STEP = 1e-6


def are_residual(A, B, Q, R, P):
    """``A^T P + P A - P B R^-1 B^T P + Q``."""
    PB = P @ B
    return A.T @ P + P @ A - PB @ np.linalg.solve(R, PB.T) + Q


def _newton_kleinman(A, B, Q, R, P):
    K = np.linalg.solve(R, B.T @ P)
    Ak = A - B @ K
    X = sla.solve_continuous_lyapunov(Ak.T, -(Q + K.T @ R @ K))
    return 0.5 * (X + X.T)


def solve_are(A, B, Q, R, refine=1):
    """Stabilizing solution of ``A^T P + P A - P B R^-1 B^T P + Q = 0``.

    The stable invariant subspace of the Hamiltonian matrix is extracted by
    an ordered real Schur decomposition.  ``refine`` Newton-Kleinman passes
    follow, and more are taken (up to a small cap) while the residual is
    above ``1e-9 (1 + ||Q||_F)``.

    Raises
    ------
    UnstabilizableError
        No stable invariant subspace of full dimension, or the closed loop
        is not Hurwitz.
    DetectabilityError
        The computed ``P`` is indefinite.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    B = B.reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n) or R.shape != (B.shape[1],) * 2:
        raise InvalidParameterError("inconsistent ARE dimensions")

    G = B @ np.linalg.solve(R, B.T)
    H = np.block([[A, -G], [-Q, -A.T]])
    try:
        _, Z, n_stable = sla.schur(H, output="real", sort="lhp")
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise UnstabilizableError(f"Schur decomposition failed: {exc}") from exc
    if n_stable != n:
        raise UnstabilizableError(f"stable subspace has dimension {n_stable}, need {n}")
    U1, U2 = Z[:n, :n], Z[n:, :n]
    if np.linalg.cond(U1) > 1.0 / np.finfo(float).eps:
        raise UnstabilizableError("stable subspace is not a graph (singular U11)")
    P = np.linalg.solve(U1.T, U2.T).T
    P = 0.5 * (P + P.T)

    tol = ARE_RTOL * (1.0 + np.linalg.norm(Q))
    res = np.linalg.norm(are_residual(A, B, Q, R, P))
    for k in range(NK_MAX_PASSES):
        if k >= refine and res <= tol:
            break
        try:
            P_new = _newton_kleinman(A, B, Q, R, P)
        except (ValueError, np.linalg.LinAlgError):
            break
        res_new = np.linalg.norm(are_residual(A, B, Q, R, P_new))
        if not res_new < res and k >= refine:
            break
        if res_new <= res or not np.isfinite(res):
            P, res = P_new, res_new

    scale = max(1.0, np.abs(P).max())
    if np.linalg.eigvalsh(P).min() < -1e-8 * scale:
        raise DetectabilityError("Riccati solution is indefinite")
    closed = A - B @ np.linalg.solve(R, B.T @ P)
    if np.linalg.eigvals(closed).real.max() >= 0:
        raise UnstabilizableError("closed loop is not Hurwitz")
    return P


def _dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)


@dataclass
class SemilinearForm:
    """Dynamics ``x' = A(x) x + B(x) u`` with cost weights ``Q``, ``R``.

    Attributes
    ----------
    state_matrix_fn : callable
        ``x -> A(x)``, an ``(l, l)`` array.
    input_matrix_fn : callable
        ``x -> B(x)``, an ``(l, m)`` array.
    Q, R : arrays
    """

    state_matrix_fn: Callable
    input_matrix_fn: Callable
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.Q = np.atleast_2d(_dense(self.Q))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))

    @property
    def dim(self):
        return self.Q.shape[0]

    @classmethod
    def from_system(cls, system, Q, R):
        """Semilinear factorization of a quadratic-bilinear system.

        With ``S(x)[i, j] = sum_k F[i, j, k] x_k`` the right-hand side is
        ``E^-1 (A + S(x)) x + E^-1 B u``.  The mass matrix is inverted once;
        for an identity mass the formula reduces to ``A + S(x)``.
        """
        E = _dense(system.E)
        A = _dense(system.A)
        if np.array_equal(E, np.eye(E.shape[0])):
            Einv = None
            A0, B0 = A, system.B
        else:
            Einv = np.linalg.inv(E)
            A0, B0 = Einv @ A, Einv @ system.B
        T = system.F.to_dense() if system.F.nnz else None

        def state_matrix(x):
            if T is None:
                return A0
            S = T @ np.asarray(x, dtype=float)
            return A0 + (S if Einv is None else Einv @ S)

        return cls(state_matrix, lambda x: B0, Q, R)


@dataclass
class FeedbackLaw:
    """A map from state to control.

    ``law(x)`` evaluates in the law's own coordinates.  When ``basis`` is set,
    :meth:`control_for` first projects a full state onto it, which is how
    :func:`statpod.qbsys.integrate` applies reduced laws to the full model.
    """

    kind: str
    evaluator: Callable
    basis: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __call__(self, x):
        return np.atleast_1d(self.evaluator(np.asarray(x, dtype=float)))

    def control_for(self, y):
        y = np.asarray(y, dtype=float)
        return self(y if self.basis is None else self.basis.T @ y)

    def jacobian(self, x):
        """``d law / d x`` as an ``(m, l)`` array.

        Uses ``metadata["jacobian"]`` when present, else central differences
        with step ``1e-6 max(1, |x|_inf)``.
        """
        x = np.asarray(x, dtype=float)
        if "jacobian" in self.metadata:
            return np.atleast_2d(self.metadata["jacobian"](x))
        step = FD_STEP * max(1.0, np.abs(x).max(initial=0.0))
        cols = []
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = step
            cols.append((self(x + e) - self(x - e)) / (2 * step))
        return np.column_stack(cols)

    def jacobian_for(self, y):
        """Jacobian of :meth:`control_for` with respect to the full state."""
        y = np.asarray(y, dtype=float)
        if self.basis is None:
            return self.jacobian(y)
        return self.jacobian(self.basis.T @ y) @ self.basis.T

    def with_basis(self, basis):
        return FeedbackLaw(self.kind, self.evaluator, basis, dict(self.metadata))


def lqr_law(form: SemilinearForm, basis=None) -> FeedbackLaw:
    """Linear feedback ``u = -R^-1 B(0)^T P0 x`` from the ARE at the origin."""
    x0 = np.zeros(form.dim)
    B0 = np.asarray(form.input_matrix_fn(x0), dtype=float)
    P0 = solve_are(form.state_matrix_fn(x0), B0, form.Q, form.R)
    K = np.linalg.solve(form.R, B0.T @ P0)
    return FeedbackLaw("LQR", lambda x: -(K @ x), basis,
                       {"gain": K, "P": P0, "jacobian": lambda x: -K})


def sdre_law(form: SemilinearForm, basis=None) -> FeedbackLaw:
    """State-dependent Riccati feedback, one ARE solve per evaluation.

    Failures raise :class:`RiccatiFailure` carrying the offending state.
    """
    Q, R = form.Q, form.R

    def evaluate(x):
        Bx = np.asarray(form.input_matrix_fn(x), dtype=float)
        try:
            P = solve_are(form.state_matrix_fn(x), Bx, Q, R)
        except StatPodError as exc:
            raise RiccatiFailure(f"SDRE solve failed: {exc}", state=np.array(x)) from exc
        return -np.linalg.solve(R, Bx.T @ (P @ x))

    return FeedbackLaw("SDRE", evaluate, basis)
