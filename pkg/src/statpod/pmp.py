"""Open-loop optimal control by a discrete-adjoint reduced-gradient method.

The cost is the left-endpoint rectangle rule

    J(u) = sum_{i<n_t} h (y_i^T Q y_i + u_i^T R u_i)

on the implicit Euler trajectory, and gradients are exact for this discrete
cost (discretize-then-optimize).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .exceptions import InvalidParameterError, NonConvergenceError
from .qbsys import (QuadraticBilinearSystem, Trajectory, integrate, step_implicit_euler,
                    time_grid)

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-6
MAX_ITER = 500
ARMIJO_C = 1e-4
ARMIJO_SHRINK = 0.5
RELIN_DECREASE = 1e-4


def _dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)


@dataclass
class OcpDefinition:
    """Finite-horizon problem ``min J`` subject to ``system`` on ``[0, T]``."""

    system: QuadraticBilinearSystem
    Q: object
    R: np.ndarray
    T: float
    n_t: int

    def __post_init__(self):
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        m = self.system.control_dim
        if self.R.shape != (m, m):
            raise InvalidParameterError("R must be m x m")
        try:
            np.linalg.cholesky(self.R)
        except np.linalg.LinAlgError as exc:
            raise InvalidParameterError("R must be symmetric positive definite") from exc
        Qd = _dense(self.Q)
        if Qd.shape != (self.system.dim,) * 2:
            raise InvalidParameterError("Q must be d x d")
        scale = 1.0 + np.abs(Qd).max()
        if np.abs(Qd - Qd.T).max() > 1e-12 * scale:
            raise InvalidParameterError("Q must be symmetric")
        try:
            np.linalg.cholesky(Qd + 1e-12 * scale * np.eye(Qd.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise InvalidParameterError("Q must be positive semidefinite") from exc
        if not sp.issparse(self.Q):
            self.Q = Qd
        if self.T <= 0 or self.n_t < 1:
            raise InvalidParameterError("need T > 0 and n_t >= 1")

    @property
    def step(self):
        return self.T / self.n_t

    def zero_control(self):
        return np.zeros((self.n_t, self.system.control_dim))

    def cost(self, trajectory: Trajectory):
        """Rectangle-rule cost of a trajectory with its controls."""
        Y = trajectory.states[:-1]
        U = trajectory.controls
        state = np.einsum("ij,ij->", Y, (self.Q @ Y.T).T)
        control = np.einsum("ij,ij->", U, U @ self.R.T)
        return self.step * (state + control)

    def running_cost(self, trajectory: Trajectory):
        """Per-step integrand values ``y_i^T Q y_i + u_i^T R u_i``."""
        Y = trajectory.states[:-1]
        U = trajectory.controls
        return np.einsum("ij,ij->i", Y, (self.Q @ Y.T).T) + np.einsum("ij,ij->i", U, U @ self.R.T)


@dataclass
class PmpSolution:
    trajectory: Trajectory
    adjoints: np.ndarray
    total_cost: float
    gradient_norm: float
    iterations: int
    converged: bool

    @property
    def controls(self):
        return self.trajectory.controls


def forward_cost(defn: OcpDefinition, ic, u_signal):
    """Integrate with ``u_signal`` of shape ``(n_t, m)``; return ``(trajectory, cost)``."""
    u = np.asarray(u_signal, dtype=float).reshape(defn.n_t, defn.system.control_dim)
    traj = integrate(defn.system, ic, u, defn.T, defn.n_t)
    return traj, defn.cost(traj)


def lq_feedback_gains(defn: OcpDefinition, trajectory: Trajectory | None = None):
    """Finite-horizon discrete LQ gains of the linearized dynamics.

    Backward Riccati recursion for the implicit Euler step linearized at the
    origin (default) or along ``trajectory``,
    ``dy_{i+1} = Phi_i dy_i + Gamma_i du_i``, with stage cost
    ``h (y^T Q y + u^T R u)`` and zero terminal weight.

    Returns
    -------
    K : (n_t, m, d) array
        Gains; ``u_i = -K_i y_i`` is optimal for the linearized problem.
    S : (n_t, m, m) array
        ``h R + Gamma_i^T P_{i+1} Gamma_i``.  For the linearized problem the
        cost equals ``y_0^T P_0 y_0 + sum_i v_i^T S_i v_i`` with
        ``v_i = u_i + K_i y_i``, so ``2 S_i`` are the diagonal blocks of its
        exact Hessian in ``v``.

    The origin gains are cached on ``defn``.
    """
    if trajectory is None:
        cached = getattr(defn, "_lq_gains", None)
        if cached is not None:
            return cached
    sys = defn.system
    h, n_t, m, d = defn.step, defn.n_t, sys.control_dim, sys.dim
    Eh = _dense(sys.E) / h
    Q = _dense(defn.Q)
    P = np.zeros((d, d))
    K = np.empty((n_t, m, d))
    S = np.empty((n_t, m, m))
    solver = sys.step_solver(np.zeros(d), h)
    for i in range(n_t - 1, -1, -1):
        if trajectory is not None:
            solver = sys.step_solver(trajectory.states[i + 1], h)
        if trajectory is not None or i == n_t - 1:
            Phi = solver.solve(Eh)
            Gam = solver.solve(sys.B)
        PG = P @ Gam
        S[i] = h * defn.R + Gam.T @ PG
        K[i] = np.linalg.solve(S[i], PG.T @ Phi)
        P = h * Q + Phi.T @ P @ (Phi - Gam @ K[i])
        P = 0.5 * (P + P.T)
    if trajectory is None:
        defn._lq_gains = (K, S)
    return K, S


def _forward_shifted(defn, ic, v, K):
    """Integrate with ``u_i = v_i - K_i y_i``; return ``(trajectory, cost)``."""
    sys = defn.system
    h, n_t = defn.step, defn.n_t
    Y = np.empty((n_t + 1, sys.dim))
    U = np.empty((n_t, sys.control_dim))
    Y[0] = np.asarray(ic, dtype=float)
    for i in range(n_t):
        U[i] = v[i] - K[i] @ Y[i]
        try:
            Y[i + 1] = step_implicit_euler(sys, Y[i], U[i], h)
        except NonConvergenceError as exc:
            exc.step = i
            raise
    traj = Trajectory(time_grid(defn.T, n_t), Y, U)
    return traj, defn.cost(traj)


def _backward(defn, traj, K=None):
    """Discrete adjoint sweep.

    Returns the gradient with respect to the open-loop controls, its
    adjoints, and (when ``K`` is given) the gradient with respect to the
    shifted variables ``v_i = u_i + K_i y_i``.
    """
    sys = defn.system
    h = defn.step
    n_t = defn.n_t
    Y, U = traj.states, traj.controls
    lam = np.zeros_like(Y)  # lam[n_t] = 0: the final state carries no cost
    grad = np.empty_like(U)
    ET = sys.E.T
    QY = (defn.Q @ Y.T).T
    RU = U @ defn.R.T
    if K is None:
        for i in range(n_t - 1, -1, -1):
            p = sys.step_solver(Y[i + 1], h).solve_transpose(lam[i + 1])
            grad[i] = 2.0 * h * RU[i] + sys.B.T @ p
            lam[i] = 2.0 * h * QY[i] + ET @ p / h
        return grad, lam, grad
    mu = np.zeros_like(Y)
    grad_v = np.empty_like(U)
    for i in range(n_t - 1, -1, -1):
        p2 = sys.step_solver(Y[i + 1], h).solve_transpose(np.column_stack([lam[i + 1], mu[i + 1]]))
        grad[i] = 2.0 * h * RU[i] + sys.B.T @ p2[:, 0]
        lam[i] = 2.0 * h * QY[i] + ET @ p2[:, 0] / h
        grad_v[i] = 2.0 * h * RU[i] + sys.B.T @ p2[:, 1]
        mu[i] = 2.0 * h * QY[i] + ET @ p2[:, 1] / h - K[i].T @ grad_v[i]
    return grad, lam, grad_v


def lq_initial_guess(defn: OcpDefinition, ic):
    """Controls of the closed loop ``u_i = -K_i y_i`` with :func:`lq_feedback_gains`.

    On a linear system this is the exact optimum; on a quadratic-bilinear
    one the feedback keeps unstable dynamics near the origin.
    """
    K, _ = lq_feedback_gains(defn)
    traj, _ = _forward_shifted(defn, ic, np.zeros((defn.n_t, defn.system.control_dim)), K)
    return traj.controls


def adjoint_gradient(defn: OcpDefinition, ic, u_signal):
    """Exact gradient of the discrete cost with respect to the control values.

    Returns
    -------
    gradient : (n_t, m) array
    cost : float
    """
    traj, cost = forward_cost(defn, ic, u_signal)
    grad, _, _ = _backward(defn, traj)
    return grad, cost


def _bfgs_update(H, s_vec, y_vec):
    sy = s_vec @ y_vec
    if sy <= 1e-14 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
        return H
    rho = 1.0 / sy
    Hy = H @ y_vec
    return (H - rho * (np.outer(s_vec, Hy) + np.outer(Hy, s_vec))
            + (rho * rho * (y_vec @ Hy) + rho) * np.outer(s_vec, s_vec))


METHODS = ("gn", "bfgs", "gd")


def pmp_solve(defn: OcpDefinition, ic, u_init=None, tol=GRAD_TOL, max_iter=MAX_ITER,
              method="gn"):
    """Minimize the discrete cost by a reduced-gradient method with Armijo backtracking.

    The search runs over shifted variables ``v_i = u_i + K_i y_i`` where
    ``K_i`` are LQ gains of the linearized dynamics (see
    :func:`lq_feedback_gains`).  The map between ``u`` and ``v`` is a
    bijection along trajectories, so both have the same minimizer, but in
    ``v`` every trial trajectory is stabilized by feedback and the
    linearized Hessian is block diagonal.

    Parameters
    ----------
    u_init : (n_t, m) array, optional
        Initial guess.  Defaults to the LQ closed loop (``v = 0``).
    tol : float
        Stop when the max-norm of the gradient in the search variables is at
        most ``tol``.
    method : {"gn", "bfgs", "gd"}
        ``"gn"`` (default) re-linearizes the gains along the current
        trajectory and steps with the inverse block-diagonal Hessian of that
        linearization (a Gauss-Newton step in ``v``) while each iteration
        still lowers the cost by a relative ``1e-4``; afterwards the gains
        are frozen and BFGS continues from the last Gauss-Newton matrix.
        ``"bfgs"`` uses the origin gains throughout.
        ``"gd"`` is plain steepest descent on ``u`` (``K = 0``).  All use
        backtracking from a unit step with ``c = 1e-4`` and halving.

    Returns
    -------
    PmpSolution
        The last accepted iterate; ``converged`` is False when ``max_iter``
        was hit or the line search stalled.  ``open_loop_gradient_norm``
        holds the max-norm of the gradient with respect to ``u`` and
        ``history`` the costs of all accepted iterates.
    """
    if method not in METHODS:
        raise InvalidParameterError(f"unknown method {method!r}")
    shape = (defn.n_t, defn.system.control_dim)

    def gains(traj):
        if method == "gd":
            return np.zeros(shape + (defn.system.dim,)), None
        K, S = lq_feedback_gains(defn, traj if method == "gn" else None)
        return K, sla.block_diag(*[np.linalg.inv(2.0 * Si) for Si in S])

    def shift(K, traj):
        return traj.controls + np.einsum("imd,id->im", K, traj.states[:-1])

    K, H0 = gains(None)
    traj = None
    if u_init is not None:
        try:
            traj, _ = forward_cost(defn, ic, np.array(u_init, dtype=float).reshape(shape))
        except NonConvergenceError:
            logger.info("initial guess diverges; starting from the LQ closed loop")
    if traj is None:
        traj, _ = _forward_shifted(defn, ic, np.zeros(shape), K)
    cost = defn.cost(traj)
    if method == "gn":
        K, H0 = gains(traj)
    v = shift(K, traj)
    grad_u, lam, grad = _backward(defn, traj, None if method == "gd" else K)
    H = None if H0 is None else H0.copy()
    relinearize = method == "gn"
    history = [cost]
    it = 0
    converged = False
    while True:
        gnorm = float(np.abs(grad).max())
        if gnorm <= tol:
            converged = True
            break
        if it >= max_iter:
            logger.info("pmp_solve hit the iteration cap (|g|=%.2e)", gnorm)
            break
        g = grad.ravel()
        direction = -g if H is None else -(H @ g)
        slope = g @ direction
        if slope >= 0:  # lost descent: restart the quasi-Newton matrix
            H = None if H0 is None else H0.copy()
            direction = -g if H is None else -(H @ g)
            slope = g @ direction
        step = 1.0
        while True:
            v_new = v + step * direction.reshape(shape)
            try:
                traj_new, cost_new = _forward_shifted(defn, ic, v_new, K)
            except NonConvergenceError:
                cost_new = np.inf  # the trial left the Newton basin; shrink
            if cost_new <= cost + ARMIJO_C * step * slope:
                break
            step *= ARMIJO_SHRINK
            if step < 1e-20:
                break
        if not cost_new <= cost + ARMIJO_C * step * slope:
            logger.warning("line search stalled at iteration %d (|g|=%.2e)", it, gnorm)
            break
        relinearize = relinearize and (cost - cost_new) > RELIN_DECREASE * cost
        if relinearize:
            K, H = gains(traj_new)
            H0 = H.copy()
            v_new = shift(K, traj_new)
        grad_u_new, lam_new, grad_new = _backward(defn, traj_new, None if method == "gd" else K)
        if method != "gd" and not relinearize:
            H = _bfgs_update(H, (v_new - v).ravel(), (grad_new - grad).ravel())
        logger.debug("iter %d cost %.12g |g_u| %.2e |g_v| %.2e step %.3g", it, cost_new,
                     np.abs(grad_u_new).max(), np.abs(grad_new).max(), step)
        v, traj, cost, grad, grad_u, lam = v_new, traj_new, cost_new, grad_new, grad_u_new, lam_new
        history.append(cost)
        it += 1
    sol = PmpSolution(traj, lam, cost, float(np.abs(grad).max()), it, converged)
    sol.open_loop_gradient_norm = float(np.abs(grad_u).max())
    sol.history = history
    return sol


def _cost_or_inf(defn, ic, u):
    try:
        return forward_cost(defn, ic, u)[1]
    except NonConvergenceError:
        return np.inf


def warm_start_choice(defn: OcpDefinition, ic, u_default, u_reduced_lift):
    """Return whichever candidate signal has the lower full-model cost.

    A candidate whose trajectory diverges counts as infinitely expensive;
    ties keep ``u_default``.
    """
    c_default = _cost_or_inf(defn, ic, u_default)
    c_reduced = _cost_or_inf(defn, ic, u_reduced_lift)
    return np.asarray(u_reduced_lift if c_reduced < c_default else u_default, dtype=float)
