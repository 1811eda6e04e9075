"""2D viscous Burgers equation with Neumann boundary control on the unit square.

P1 finite elements on a uniform right-angled triangulation.  The scalar state
is advected by the velocity ``(y, y)``, so the convection term is
``y (d1 y + d2 y)``.  The control enters through ``B_i = 1`` at the nodes of
the left edge ``{0} x [0, 1]``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .exceptions import InvalidParameterError
from .qbsys import QuadraticBilinearSystem, QuadraticTensor, RandomFieldIC


@dataclass
class BurgersConfig:
    n_side: int = 17
    nu: float = 0.02
    alpha: float = 0.0
    T: float = 50.0
    n_t: int = 100
    ic: RandomFieldIC = field(default_factory=RandomFieldIC)
    control_weight: float = 1.0

    @property
    def dim(self):
        return self.n_side ** 2

    @property
    def step(self):
        return self.T / self.n_t

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class BurgersProblem:
    """Assembled benchmark: dynamics, cost weights and node coordinates."""

    config: BurgersConfig
    system: QuadraticBilinearSystem
    Q: sp.csr_matrix
    R: np.ndarray
    grid: np.ndarray
    stiffness: sp.csr_matrix

    def initial_condition(self, seed=None, **ic_changes):
        rf = replace(self.config.ic, **ic_changes) if ic_changes else self.config.ic
        return rf.sample(self.grid, seed=seed)


def mesh(n_side):
    """Nodes ``(d, 2)`` and triangles ``(n_tri, 3)`` of the unit square.

    Node ``k = j * n_side + i`` sits at ``(i h, j h)``.
    """
    if n_side < 3:
        raise InvalidParameterError("need at least 3 nodes per side")
    x = np.linspace(0.0, 1.0, n_side)
    X1, X2 = np.meshgrid(x, x)
    nodes = np.column_stack([X1.ravel(), X2.ravel()])
    i, j = np.meshgrid(np.arange(n_side - 1), np.arange(n_side - 1))
    ll = (j * n_side + i).ravel()
    lr, ul, ur = ll + 1, ll + n_side, ll + n_side + 1
    tris = np.vstack([np.column_stack([ll, lr, ur]), np.column_stack([ll, ur, ul])])
    return nodes, tris


def _p1_gradients(nodes, tris):
    P = nodes[tris]  # (nt, 3, 2)
    D = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=1)  # rows: edge vectors
    det = D[:, 0, 0] * D[:, 1, 1] - D[:, 0, 1] * D[:, 1, 0]
    area = 0.5 * np.abs(det)
    inv = np.empty_like(D)
    inv[:, 0, 0] = D[:, 1, 1] / det
    inv[:, 0, 1] = -D[:, 0, 1] / det
    inv[:, 1, 0] = -D[:, 1, 0] / det
    inv[:, 1, 1] = D[:, 0, 0] / det
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # reference gradients
    grads = np.einsum("ak,tkc->tac", ref, np.transpose(inv, (0, 2, 1)))
    return grads, area


def assemble(cfg: BurgersConfig) -> BurgersProblem:
    """Assemble ``E y' = (C + alpha E) y + F(y ⊗ y) + B u`` and the cost weights."""
    nodes, tris = mesh(cfg.n_side)
    d = nodes.shape[0]
    grads, area = _p1_gradients(nodes, tris)

    local_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    Me = area[:, None, None] * local_mass
    Ke = area[:, None, None] * np.einsum("tac,tbc->tab", grads, grads)
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    E = sp.csr_matrix((Me.ravel(), (rows, cols)), shape=(d, d))
    K = sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(d, d))
    E = (E + E.T) * 0.5  # exact symmetry
    K = (K + K.T) * 0.5
    C = -cfg.nu * K

    # F_i(y) = -sum_T sum_jk y_j y_k g_j int phi_i phi_k, g_j = d1 phi_j + d2 phi_j.
    # The first factor is differentiated, so S(y) = sum_k F[:, :, k] y_k is the
    # advection operator with frozen velocity (y, y).
    g = grads.sum(axis=2)  # (nt, 3)
    vals = -Me[:, :, None, :] * g[:, None, :, None]  # (nt, a, b, c)
    ti = np.broadcast_to(tris[:, :, None, None], vals.shape)
    tj = np.broadcast_to(tris[:, None, :, None], vals.shape)
    tk = np.broadcast_to(tris[:, None, None, :], vals.shape)
    F = QuadraticTensor(d, ti.ravel(), tj.ravel(), tk.ravel(), vals.ravel())

    B = np.zeros((d, 1))
    B[np.isclose(nodes[:, 0], 0.0), 0] = 1.0

    A = C + cfg.alpha * E
    system = QuadraticBilinearSystem(E=E, A=A, F=F, B=B, alpha=cfg.alpha)
    R = cfg.control_weight * np.eye(1)
    return BurgersProblem(cfg, system, sp.csr_matrix(E), R, nodes, sp.csr_matrix(K))


def cosine_ic(grid, amplitude=0.5):
    """``amplitude * cos(pi x1) cos(pi x2)`` at the grid nodes."""
    grid = np.asarray(grid)
    return amplitude * np.cos(np.pi * grid[:, 0]) * np.cos(np.pi * grid[:, 1])


# ---------------------------------------------------------------------------
# experiments

BENCHMARK_KINDS = ("spod", "pod-controlled", "pod-uncontrolled", "feedback")


@dataclass
class BenchmarkReport:
    """Outcome of one experiment of :func:`run_benchmark`.

    ``indicators`` compares the reduced controller with the full optimum on
    the test initial conditions (reduced-basis kinds).  For ``"feedback"``
    it compares the TT surrogate with its SDRE source, and ``costs`` maps
    ``(law, ic name)`` to the full-model cost.
    """

    kind: str
    ell: int
    N: int
    indicators: object = None
    costs: dict = field(default_factory=dict)
    model: object = None
    laws: dict = field(default_factory=dict)
    times: dict = field(default_factory=dict)


def _cached(cache, key, fn):
    if cache is None:
        return fn()
    if key not in cache:
        cache[key] = fn()
    return cache[key]


def _pod_basis(problem, controller, ell):
    from .spod import build_reduced, solve_sample, svd_basis
    ic = problem.config.ic.mean_field(problem.grid)
    traj = solve_sample(problem, controller, ic)
    U, s = svd_basis(traj.snapshot_columns())
    return build_reduced(problem.system, problem.Q, U[:, :ell], singular_values=s,
                         source=f"1-pod-{controller}")


def feedback_box(problem, model, margin=0.1):
    """TT box around the reduced training data, initial conditions included.

    Snapshot columns start at ``t_1``, so the initial states are added back
    from the seeds recorded in the provenance.
    """
    from .ftt import snapshot_box
    snaps = model.snapshots
    seeds = sorted({p[2] for p in snaps.provenance if p[2] is not None})
    cols = [snaps.data] + [problem.initial_condition(seed=s)[:, None] for s in seeds]
    return snapshot_box(model.reduce(np.hstack(cols)).T, margin)


def run_benchmark(cfg: BurgersConfig, kind, ell, N=20, test_seeds=None, seeds=None,
                  feedback_ics=None, cross=None, cache=None, **pmp_kw):
    """Run one named experiment on the Burgers benchmark.

    Parameters
    ----------
    cfg : BurgersConfig
    kind : str
        ``"spod"`` (basis from ``N`` optimal trajectories with random
        initial data), ``"pod-controlled"`` or ``"pod-uncontrolled"`` (basis
        from one optimal or uncontrolled trajectory of the mean initial
        condition), or ``"feedback"`` (LQR, SDRE and TT-SDRE laws on the
        SPOD basis).
    ell : int
        Reduced dimension.
    N : int
        Training samples for the statistical basis.
    test_seeds : sequence of int
        Seeds of the test initial conditions; default ``1000 .. 1009``.
    seeds : sequence of int, optional
        Training seeds, default ``0 .. N-1``.
    feedback_ics : dict name -> (d,) array, optional
        Initial conditions for ``"feedback"``; default the constant mean
        field and the cosine field.
    cross : CrossConfig, optional
        TT-cross settings for ``"feedback"``.
    cache : dict, optional
        Shared between calls to reuse the assembled problem, offline bases
        and full-model reference optima.

    Returns
    -------
    BenchmarkReport
    """
    from .evalrisk import SignalController, indicators, reduced_pmp_controller, run_full
    from .pmp import OcpDefinition, pmp_solve
    from .spod import offline_stage

    if kind not in BENCHMARK_KINDS:
        raise InvalidParameterError(f"unknown experiment {kind!r}; expected one of {BENCHMARK_KINDS}")
    cfg_key = repr(cfg)
    problem = _cached(cache, ("problem", cfg_key), lambda: assemble(cfg))
    defn = OcpDefinition(problem.system, problem.Q, problem.R, cfg.T, cfg.n_t)
    report = BenchmarkReport(kind, int(ell), int(N))

    def spod_snapshots():
        model, off = offline_stage(problem, N, ell=1, seeds=seeds, **pmp_kw)
        return model.snapshots, off

    def spod_reduced():
        from .spod import build_reduced, svd_basis
        snaps, off = _cached(cache, ("spod", cfg_key, N, tuple(seeds or ())), spod_snapshots)
        U, s = svd_basis(snaps.data)
        model = build_reduced(problem.system, problem.Q, U[:, :ell], singular_values=s,
                              source=snaps.digest())
        model.snapshots = snaps
        return model, off

    t0 = time.perf_counter()
    if kind in ("spod", "feedback"):
        model, off = spod_reduced()
        report.times["offline"] = off.total_time
    elif kind == "pod-controlled":
        model = _cached(cache, ("pod", cfg_key, "pmp", ell), lambda: _pod_basis(problem, "pmp", ell))
    else:
        model = _cached(cache, ("pod", cfg_key, "none", ell), lambda: _pod_basis(problem, "none", ell))
    report.model = model
    report.times["basis"] = time.perf_counter() - t0

    if kind != "feedback":
        test_seeds = list(range(1000, 1010)) if test_seeds is None else list(test_seeds)
        ics = [problem.initial_condition(seed=s) for s in test_seeds]

        def reference_for(seed, ic):
            return _cached(cache, ("ref", cfg_key, seed),
                           lambda: pmp_solve(defn, ic, **pmp_kw).controls)

        refs = {s: reference_for(s, ic) for s, ic in zip(test_seeds, ics)}
        by_ic = {ic.tobytes(): refs[s] for s, ic in zip(test_seeds, ics)}
        reference = SignalController(lambda ic: by_ic[np.asarray(ic).tobytes()], "full-pmp")
        reduced = reduced_pmp_controller(model, defn, **pmp_kw)
        report.indicators = indicators(defn, reduced, reference, ics)
        return report

    from .ftt import CrossConfig, tt_feedback_law
    from .riccati import lqr_law, sdre_law
    form = model.semilinear_form(problem.R)
    lqr = lqr_law(form, basis=model.basis)
    sdre = sdre_law(form, basis=model.basis)
    Xr = model.reduce(model.snapshots.data).T
    t0 = time.perf_counter()
    tt = tt_feedback_law(sdre, feedback_box(problem, model), cross or CrossConfig(), init_points=Xr,
                         basis=model.basis, fallback=lqr)
    report.times["ttcross"] = time.perf_counter() - t0
    report.laws = {"LQR": lqr, "SDRE": sdre, "TT": tt}
    if feedback_ics is None:
        feedback_ics = {"constant": problem.config.ic.mean_field(problem.grid),
                        "cosine": cosine_ic(problem.grid)}
    for name, ic in feedback_ics.items():
        for lname, law in report.laws.items():
            report.costs[(lname, name)] = run_full(defn, ic, law)[1]
    report.indicators = indicators(defn, sdre, sdre, list(feedback_ics.values()),
                                   tt_law=tt, tt_source=sdre)
    return report
