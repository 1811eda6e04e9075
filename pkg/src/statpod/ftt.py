"""Functional tensor trains with Legendre cores and TT-cross construction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre as npleg

from .exceptions import InvalidParameterError, PivotDegeneracyError, RiccatiFailure
from .riccati import FeedbackLaw

logger = logging.getLogger(__name__)

MAXVOL_TOL = 1.05
MAXVOL_MAXITER = 100
RANK_RTOL = 1e-13


def legendre_basis(x, n, a=-1.0, b=1.0):
    """Legendre polynomials of degree ``< n``, orthonormal in ``L2(a, b)``.

    Returns an array of shape ``x.shape + (n,)``.
    """
    x = np.asarray(x, dtype=float)
    width = np.asarray(b, dtype=float) - a
    t = (2.0 * x - (a + b)) / width
    V = npleg.legvander(t, n - 1).reshape(t.shape + (n,))
    return V * np.sqrt((2.0 * np.arange(n) + 1.0) / width[..., None])


def gauss_legendre_nodes(n, a=-1.0, b=1.0):
    t, _ = npleg.leggauss(n)
    return 0.5 * (a + b) + 0.5 * (b - a) * t


@dataclass
class TTFunction:
    """``f(x) = G_1(x_1) G_2(x_2) ... G_l(x_l)`` with ``G_k(x) = sum_i U_k[:, i, :] phi_i(x)``.

    Parameters
    ----------
    cores : list of (r_{k-1}, n_k, r_k) arrays
        Coefficients in the orthonormal Legendre basis of each interval.
    domain : (l, 2) array
        Box ``[a_k, b_k]``.  Points outside are clamped onto it.
    """

    cores: list
    domain: np.ndarray
    converged: bool = True
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cores = [np.asarray(c, dtype=float) for c in self.cores]
        self.domain = np.asarray(self.domain, dtype=float).reshape(-1, 2)
        if len(self.cores) != self.domain.shape[0]:
            raise InvalidParameterError("one core per dimension is required")
        if np.any(self.domain[:, 1] <= self.domain[:, 0]):
            raise InvalidParameterError("empty domain interval")
        prev = 1
        for c in self.cores:
            if c.ndim != 3 or c.shape[0] != prev:
                raise InvalidParameterError("inconsistent rank chain")
            prev = c.shape[2]
        if prev != 1:
            raise InvalidParameterError("last rank must be 1")
        self._prepare()

    def _prepare(self):
        # (n_k, r_{k-1}, r_k) copies make the single-point contraction a tensordot
        self._stacked = [np.ascontiguousarray(c.transpose(1, 0, 2)) for c in self.cores]
        ns = self.basis_sizes
        self._uniform_n = ns[0] if len(set(ns)) == 1 else None

    @property
    def dim(self):
        return len(self.cores)

    @property
    def ranks(self):
        return [1] + [c.shape[2] for c in self.cores]

    @property
    def basis_sizes(self):
        return [c.shape[1] for c in self.cores]

    def clamp(self, X):
        return np.clip(X, self.domain[:, 0], self.domain[:, 1])

    def _basis_values(self, X):
        """``phi[k][..., i]`` for every dimension."""
        a, b = self.domain[:, 0], self.domain[:, 1]
        if self._uniform_n is not None:
            return legendre_basis(X, self._uniform_n, a, b)  # (..., l, n)
        return [legendre_basis(X[..., k], c.shape[1], a[k], b[k]) for k, c in enumerate(self.cores)]

    def __call__(self, x):
        """Evaluate at one point ``(l,)`` or a batch ``(N, l)``."""
        X = self.clamp(np.asarray(x, dtype=float))
        if X.ndim == 1:
            phi = self._basis_values(X)
            v = np.tensordot(phi[0], self._stacked[0], 1)[0]
            for k in range(1, self.dim):
                v = v @ np.tensordot(phi[k], self._stacked[k], 1)
            return float(v[0])
        phi = self._basis_values(X)
        v = np.ones((X.shape[0], 1))
        for k, c in enumerate(self.cores):
            pk = phi[:, k] if self._uniform_n is not None else phi[k]
            v = np.einsum("na,nab->nb", v, np.einsum("ni,aib->nab", pk, c))
        return v[:, 0]

    def scaled(self, k, alpha):
        cores = [c.copy() for c in self.cores]
        cores[k] = cores[k] * alpha
        return TTFunction(cores, self.domain.copy(), self.converged, dict(self.info))


def tt_eval(f: TTFunction, x):
    return f(x)


def tt_sum_of_coordinates(domain, weights=None, n=2):
    """Exact rank-2 TT of ``sum_k w_k x_k`` on ``domain``."""
    domain = np.asarray(domain, dtype=float).reshape(-1, 2)
    ell = domain.shape[0]
    w = np.ones(ell) if weights is None else np.asarray(weights, dtype=float)
    cores = []
    for k, (a, b) in enumerate(domain):
        # coefficients of 1 and x in the orthonormal basis
        one = np.zeros(n)
        one[0] = np.sqrt(b - a)
        lin = np.zeros(n)
        lin[0] = 0.5 * (a + b) * np.sqrt(b - a)
        lin[1] = 0.5 * (b - a) * np.sqrt((b - a) / 3.0)
        G = np.zeros((2, n, 2))
        G[0, :, 0] = one
        G[0, :, 1] = w[k] * lin
        G[1, :, 1] = one
        if k == 0:
            G = G[:1]
        if k == ell - 1:
            G = G[:, :, 1:]
        cores.append(G)
    return TTFunction(cores, domain)


@dataclass
class CrossConfig:
    """TT-cross settings.

    Attributes
    ----------
    tolerance : float
        Target relative L2 error on the validation set.
    max_rank : int
    max_sweeps : int
        Directional passes (left-to-right or right-to-left).
    n : int
        Basis size (Gauss-Legendre nodes) per dimension.
    initial_rank : int
    n_validation : int
    pivoting : str
        Only ``"maxvol"``.
    seed : int
    """

    tolerance: float = 1e-3
    max_rank: int = 20
    max_sweeps: int = 20
    n: int = 6
    initial_rank: int = 1
    n_validation: int = 1000
    pivoting: str = "maxvol"
    seed: int = 0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InvalidParameterError("tolerance must be positive")
        if self.max_rank < 1 or self.initial_rank < 1:
            raise InvalidParameterError("ranks must be at least 1")
        if self.n < 1 or self.max_sweeps < 1:
            raise InvalidParameterError("n and max_sweeps must be positive")
        if self.pivoting != "maxvol":
            raise InvalidParameterError(f"unknown pivoting rule {self.pivoting!r}")


def maxvol(A, tol=MAXVOL_TOL, max_iter=MAXVOL_MAXITER):
    """Rows of a tall ``(N, r)`` matrix spanning a submatrix of locally maximal volume.

    Greedy row swaps starting from partial-pivoting LU rows, until no
    entry of ``A A[rows]^-1`` exceeds ``tol`` in modulus.
    """
    N, r = A.shape
    if r == 0:
        return np.zeros(0, dtype=int)
    if r > N:
        raise InvalidParameterError("maxvol needs at least as many rows as columns")
    rows = perm_pivots(A)
    sub = A[rows]
    if np.linalg.cond(sub) > 1e14:
        raise PivotDegeneracyError("initial maxvol submatrix is singular")
    Bm = np.linalg.solve(sub.T, A.T).T  # A @ inv(sub)
    for _ in range(max_iter):
        i, j = np.unravel_index(np.argmax(np.abs(Bm)), Bm.shape)
        if abs(Bm[i, j]) <= tol:
            break
        # swap row j of the submatrix for row i (rank-one update of Bm)
        bj = Bm[:, j].copy()
        ri = Bm[i].copy()
        ri[j] -= 1.0
        Bm -= np.outer(bj, ri / Bm[i, j])
        rows[j] = i
    return np.array(rows, dtype=int)


def perm_pivots(A):
    """Row indices chosen by partial pivoting on ``A`` (first ``r`` pivots)."""
    N, r = A.shape
    M = A.copy()
    rows = np.arange(N)
    for k in range(r):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if p != k:
            M[[k, p]] = M[[p, k]]
            rows[[k, p]] = rows[[p, k]]
        if M[k, k] != 0:
            M[k + 1:, k:] -= np.outer(M[k + 1:, k] / M[k, k], M[k, k:])
    return rows[:r].copy()


def _orth(M):
    """Orthonormal basis of the numerical column space of ``M`` (rank-revealing QR)."""
    import scipy.linalg as sla

    Qm, Rm, _ = sla.qr(M, mode="economic", pivoting=True)
    d = np.abs(np.diag(Rm))
    if d.size == 0 or d[0] == 0:
        return Qm[:, :1]
    keep = max(1, int(np.sum(d > RANK_RTOL * d[0])))
    return Qm[:, :keep]


class _Sampler:
    """Oracle on the Gauss-Legendre grid with memoization and a call counter."""

    def __init__(self, oracle, nodes, batch):
        self.oracle = oracle
        self.nodes = nodes
        self.batch = batch
        self.cache = {}
        self.calls = 0

    def points(self, idx):
        return np.stack([self.nodes[k][idx[:, k]] for k in range(idx.shape[1])], axis=1)

    def __call__(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        keys = [row.tobytes() for row in idx]
        missing = [i for i, key in enumerate(keys) if key not in self.cache]
        if missing:
            uniq = {}
            for i in missing:
                uniq.setdefault(keys[i], i)
            order = list(uniq.values())
            X = self.points(idx[order])
            vals = self.evaluate(X)
            self.calls += len(order)
            for i, v in zip(order, vals):
                self.cache[keys[i]] = float(v)
        return np.array([self.cache[key] for key in keys])

    def evaluate(self, X):
        if self.batch:
            return np.asarray(self.oracle(X), dtype=float).reshape(-1)
        return np.array([float(self.oracle(x)) for x in X])


def _fiber_indices(left, k, n, right):
    """Multi-indices ``left[a] + (i,) + right[b]`` in (a, i, b) order."""
    ra, rb = left.shape[0], right.shape[0]
    A = np.repeat(left, n * rb, axis=0)
    I = np.tile(np.repeat(np.arange(n), rb), ra)[:, None]
    Bm = np.tile(right, (ra * n, 1))
    return np.hstack([A, I, Bm])


def _random_multi(rng, n_list, count):
    return np.stack([rng.integers(0, n, size=count) for n in n_list], axis=1).astype(np.int64)


def _augment(sets, rng, n_list, side, ell, max_rank):
    """Add one random index to every interface set below ``max_rank``."""
    out = []
    for k, S in enumerate(sets):
        dims = n_list[:k + 1] if side == "left" else n_list[k + 1:]
        if S.shape[0] < max_rank and S.shape[0] < np.prod(dims, dtype=float):
            for _ in range(20):
                extra = _random_multi(rng, dims, 1)
                if not np.any(np.all(S == extra, axis=1)):
                    S = np.vstack([S, extra])
                    break
        out.append(S)
    return out


def tt_cross(oracle, domain, cfg: CrossConfig | None = None, init_points=None, batch=False):
    """TT-cross interpolation of ``oracle`` on a box.

    The function is sampled on the tensor grid of ``cfg.n`` Gauss-Legendre
    nodes per dimension.  Directional passes alternate; each pass computes
    the fibers ``f(I_<k, x_k, J_>k)`` core by core, orthogonalizes them and
    picks the next nested index set by maxvol.  The resulting interpolant
    is converted from nodal values to Legendre coefficients.  After each
    pass the relative L2 error on ``cfg.n_validation`` uniform random
    points decides convergence; otherwise every interface rank grows by one
    (up to ``cfg.max_rank``).

    Parameters
    ----------
    oracle : callable
        ``x -> float`` or, with ``batch=True``, ``(N, l) -> (N,)``.
    domain : (l, 2) array
    init_points : (M, l) array, optional
        Points whose nearest grid indices seed the initial index sets,
        e.g. reduced training snapshots.

    Returns
    -------
    TTFunction
        ``info`` holds ``ranks``, ``validation_error``, ``calls``,
        ``calls_per_sweep``, ``pass_sizes`` (interface set sizes read in
        each pass), ``sweeps`` and ``last_cross`` (points on which the
        result interpolates the oracle); ``converged`` is False when the
        tolerance was not met.
    """
    cfg = cfg or CrossConfig()
    domain = np.asarray(domain, dtype=float).reshape(-1, 2)
    ell = domain.shape[0]
    n = cfg.n
    n_list = [n] * ell
    rng = np.random.default_rng(cfg.seed)
    nodes = [gauss_legendre_nodes(n, a, b) for a, b in domain]
    sampler = _Sampler(oracle, nodes, batch)
    # nodal values -> orthonormal Legendre coefficients
    inv_vander = [np.linalg.inv(legendre_basis(nd, n, a, b)) for nd, (a, b) in zip(nodes, domain)]

    Xval = domain[:, 0] + (domain[:, 1] - domain[:, 0]) * rng.random((cfg.n_validation, ell))
    fval = (np.asarray(oracle(Xval), dtype=float).reshape(-1) if batch
            else np.array([float(oracle(x)) for x in Xval]))
    fnorm = np.linalg.norm(fval)

    # initial multi-indices: nearest grid nodes of the given points, else random
    r0 = min(cfg.initial_rank, cfg.max_rank)
    if init_points is not None and len(init_points):
        P = np.asarray(init_points, dtype=float).reshape(-1, ell)
        sel = P[rng.choice(P.shape[0], size=min(r0, P.shape[0]), replace=False)]
        seeds = np.stack([np.argmin(np.abs(sel[:, k, None] - nodes[k][None, :]), axis=1)
                          for k in range(ell)], axis=1).astype(np.int64)
    else:
        seeds = _random_multi(rng, n_list, r0)
    right = [np.unique(seeds[:, k + 1:], axis=0) for k in range(ell - 1)] + [np.zeros((1, 0), np.int64)]
    left = [np.zeros((1, 0), np.int64)] + [None] * (ell - 1)

    def rebuild_check(cores_nodal):
        cores = [np.einsum("ij,ajb->aib", inv_vander[k], c) for k, c in enumerate(cores_nodal)]
        f = TTFunction(cores, domain)
        err = np.linalg.norm(f(Xval) - fval)
        return f, err / fnorm if fnorm > 0 else err

    best, best_err = None, np.inf
    calls_per_sweep, pass_sizes = [], []
    direction = "lr"
    converged = False
    sweeps = 0
    for sweep in range(cfg.max_sweeps):
        sweeps += 1
        before = sampler.calls
        sizes = []
        cores = [None] * ell
        if direction == "lr":
            for k in range(ell):
                L, Rs = left[k], right[k]
                sizes.append((L.shape[0], Rs.shape[0]))
                C = sampler(_fiber_indices(L, k, n, Rs)).reshape(L.shape[0], n, Rs.shape[0])
                if k == ell - 1:
                    cores[k] = C
                    break
                M = C.reshape(L.shape[0] * n, Rs.shape[0])
                Qm = _orth(M)
                rows = _safe_maxvol(Qm, rng)
                cores[k] = (Qm @ np.linalg.inv(Qm[rows])).reshape(L.shape[0], n, -1)
                a, i = np.divmod(rows, n)
                left[k + 1] = np.hstack([L[a], i[:, None]])
        else:
            for k in range(ell - 1, -1, -1):
                L, Rs = left[k], right[k]
                sizes.append((L.shape[0], Rs.shape[0]))
                C = sampler(_fiber_indices(L, k, n, Rs)).reshape(L.shape[0], n, Rs.shape[0])
                if k == 0:
                    cores[k] = C
                    break
                M = C.reshape(L.shape[0], n * Rs.shape[0]).T
                Qm = _orth(M)
                rows = _safe_maxvol(Qm, rng)
                cores[k] = (Qm @ np.linalg.inv(Qm[rows])).T.reshape(-1, n, Rs.shape[0])
                i, b = np.divmod(rows, Rs.shape[0])
                right[k - 1] = np.hstack([i[:, None], Rs[b]])
        calls_per_sweep.append(sampler.calls - before)
        pass_sizes.append(sizes)
        f, err = rebuild_check(cores)
        # the core built last interpolates the oracle on this cross
        k_last = ell - 1 if direction == "lr" else 0
        f.info["last_cross"] = _fiber_indices(left[k_last], k_last, n, right[k_last])
        logger.debug("tt_cross pass %d (%s): ranks %s, validation error %.3e",
                     sweep, direction, f.ranks, err)
        if err < best_err:
            best, best_err = f, err
        if err <= cfg.tolerance:
            converged = True
            break
        # grow the sets the next pass reads from
        if direction == "lr":
            left = [left[0]] + _augment(left[1:], rng, n_list, "left", ell, cfg.max_rank)
            direction = "rl"
        else:
            right = _augment(right[:-1], rng, n_list, "right", ell, cfg.max_rank) + [right[-1]]
            direction = "lr"
    best.converged = converged
    best.info = {"last_cross": sampler.points(best.info["last_cross"]),
                 "ranks": best.ranks, "validation_error": float(best_err),
                 "calls": sampler.calls, "calls_per_sweep": calls_per_sweep, "sweeps": sweeps,
                 "pass_sizes": pass_sizes}
    if not converged:
        logger.warning("tt_cross stopped at validation error %.3e > %.1e", best_err, cfg.tolerance)
    return best


def _safe_maxvol(Qm, rng):
    try:
        return maxvol(Qm)
    except PivotDegeneracyError:
        # one retry on a slightly perturbed matrix, then give up
        noisy = Qm + 1e-10 * rng.standard_normal(Qm.shape)
        return maxvol(noisy)


def snapshot_box(reduced_states, margin=0.1):
    """Componentwise min/max of ``(N, l)`` reduced states, widened by ``margin`` of the range."""
    Xr = np.asarray(reduced_states, dtype=float)
    lo, hi = Xr.min(axis=0), Xr.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-12)
    return np.column_stack([lo - pad, hi + pad])


def tt_feedback_law(source_law, box, cfg: CrossConfig | None = None, control_dim=1,
                    init_points=None, basis=None, fallback=None):
    """TT surrogate of a feedback law, one TT per control component.

    The returned law clamps its input to ``box`` and evaluates the TTs.

    Parameters
    ----------
    fallback : callable, optional
        Law sampled instead of ``source_law`` at states where the latter
        raises :class:`RiccatiFailure` (an SDRE whose state matrix has an
        unstabilizable mode there).  Without it the failure propagates.
        The number of substituted samples is stored in
        ``metadata["fallback_calls"]``.
    """
    box = np.asarray(box, dtype=float)
    failures = []

    def guarded(x):
        try:
            return np.atleast_1d(source_law(x))
        except RiccatiFailure:
            if fallback is None:
                raise
            failures.append(np.array(x, copy=True))
            return np.atleast_1d(fallback(x))

    tts = []
    for j in range(control_dim):
        comp = lambda x, j=j: float(guarded(x)[j])
        tts.append(tt_cross(comp, box, cfg, init_points=init_points))
    if failures:
        logger.warning("source law failed at %d sampled states; fallback used", len(failures))

    def evaluate(x):
        return np.array([tt(x) for tt in tts])

    law = FeedbackLaw("TT", evaluate, basis if basis is not None else getattr(source_law, "basis", None),
                      {"tts": tts, "box": box, "fallback_calls": len(failures)})
    return law
