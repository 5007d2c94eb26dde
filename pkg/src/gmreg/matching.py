"""Weighted graph matching between two keypoint graphs.

The correspondence ``C`` is an ``m x n`` matrix (rows: graph 1, columns:
graph 2) relaxed to the hull of partial permutations, i.e. nonnegative with
row and column sums at most one. ``C @ V2`` maps graph-2 node attributes onto
graph-1 rows, so a good ``C`` preserves every graph-1 edge length after the
mapping. Objectives are minimized with Frank-Wolfe, whose linear subproblem
over that hull is a linear assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ShapeMismatch, TooLarge
from .graph import KeypointGraph, gaussian_adjacency

FEAS_TOL = 1e-9
GOLDEN_ITERS = 40


@dataclass(frozen=True)
class GmConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.5
    max_fw_iters: int = 100
    fw_tol: float = 1e-6
    unmatched_cost: float | None = None  # None: 75th percentile of D

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValueError("alpha weights must be nonnegative")
        if self.max_fw_iters < 1:
            raise ValueError("max_fw_iters must be >= 1")
        if not self.fw_tol > 0:
            raise ValueError("fw_tol must be positive")

    def resolve(self, D: np.ndarray) -> "GmConfig":
        if self.unmatched_cost is not None:
            return self
        return replace(self, unmatched_cost=float(np.percentile(D, 75)) if np.size(D) else 0.0)


@dataclass(frozen=True, eq=False)
class CorrespondenceMatrix:
    values: np.ndarray
    mode: str = "relaxed"  # or "discrete"

    def __post_init__(self):
        V = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", V)
        if self.mode not in ("relaxed", "discrete"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "discrete" and not is_partial_permutation(V):
            raise ValueError("discrete correspondence must be a partial permutation")
        if self.mode == "relaxed" and not is_relaxed_feasible(V):
            raise ValueError("relaxed correspondence violates the substochastic constraints")

    @property
    def shape(self):
        return self.values.shape

    def pairs(self) -> np.ndarray:
        """Matched ``(row, col)`` pairs of a discrete correspondence, by row."""
        return np.argwhere(self.values > 0.5)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def is_relaxed_feasible(C: np.ndarray, tol: float = FEAS_TOL) -> bool:
    C = np.asarray(C)
    return bool(
        np.all(C >= -tol)
        and np.all(C <= 1 + tol)
        and np.all(C.sum(axis=1) <= 1 + tol)
        and np.all(C.sum(axis=0) <= 1 + tol)
    )


def is_partial_permutation(C: np.ndarray) -> bool:
    C = np.asarray(C)
    return bool(
        np.all((C == 0) | (C == 1)) and np.all(C.sum(axis=1) <= 1) and np.all(C.sum(axis=0) <= 1)
    )


def _values(C) -> np.ndarray:
    return np.asarray(getattr(C, "values", C), dtype=float)


def _check_shapes(C, g1: KeypointGraph, g2: KeypointGraph, D) -> None:
    m, n = len(g1), len(g2)
    if C.shape != (m, n) or np.shape(D) != (m, n):
        raise ShapeMismatch(f"C {C.shape}, D {np.shape(D)} vs graphs {m}x{n}")


# ---------------------------------------------------------------- assignment


def _assign_negative(cost: np.ndarray, strict: bool) -> np.ndarray:
    """Partial permutation minimizing ``<S, cost>``: only non-positive entries pay off."""
    m, n = cost.shape
    S = np.zeros((m, n))
    if m == 0 or n == 0:
        return S
    clipped = np.minimum(cost, 0.0)
    r, c = linear_sum_assignment(clipped)
    keep = cost[r, c] < 0 if strict else cost[r, c] <= 0
    S[r[keep], c[keep]] = 1.0
    return S


def hungarian(cost, unmatched_cost: float) -> CorrespondenceMatrix:
    """Optimal partial assignment where each unmatched row or column costs ``unmatched_cost``.

    Matching ``(i, j)`` saves ``2 * unmatched_cost - cost[i, j]`` over leaving
    both free, so the problem is a linear assignment on the shifted costs.
    """
    cost = np.asarray(cost, dtype=float)
    if not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite")
    S = _assign_negative(cost - 2.0 * unmatched_cost, strict=True)
    return CorrespondenceMatrix(S, "discrete")


def assignment_cost(C, cost, unmatched_cost: float) -> float:
    """Total cost of a partial assignment including its unmatched penalties."""
    C = _values(C)
    m, n = C.shape
    k = C.sum()
    return float(np.sum(C * cost) + unmatched_cost * (m + n - 2 * k))


def discretize(C, cost=None, unmatched_cost: float | None = None) -> CorrespondenceMatrix:
    """Round a relaxed correspondence to a partial permutation.

    Without ``cost`` the permutation maximizing ``sum C`` over full
    assignments is returned. With ``cost`` the rounding minimizes
    ``cost - C`` and drops pairs whose cost exceeds ``unmatched_cost``.
    """
    C = _values(C)
    if cost is None:
        S = np.zeros_like(C)
        r, c = linear_sum_assignment(-C)
        S[r, c] = 1.0
        return CorrespondenceMatrix(S, "discrete")
    cost = np.asarray(cost, dtype=float)
    gate = cost <= unmatched_cost
    S = _assign_negative(np.where(gate, -C - 1.0, 0.0), strict=True)
    return CorrespondenceMatrix(S, "discrete")


def _perm_matrix(rows, cols, shape) -> np.ndarray:
    S = np.zeros(shape)
    S[rows, cols] = 1.0
    return S


def _swap_search(cols: np.ndarray, score, n: int, max_passes: int = 50):
    """First-improvement local search over row swaps and moves to free columns."""
    cols = cols.copy()
    best = score(cols)
    m = len(cols)
    for _ in range(max_passes):
        improved = False
        for i in range(m):
            free = np.setdiff1d(np.arange(n), cols)
            for j in list(range(i + 1, m)) + [None] * len(free):
                trial = cols.copy()
                if j is None:
                    trial[i] = free[0]
                    free = free[1:]
                else:
                    trial[i], trial[j] = cols[j], cols[i]
                f = score(trial)
                if f < best - 1e-12:
                    cols, best, improved = trial, f, True
        if not improved:
            break
    return cols, best


def discretize_j1(C, g1: KeypointGraph, g2: KeypointGraph, D, cfg: GmConfig) -> CorrespondenceMatrix:
    """Full assignment (``min(m, n)`` pairs) with low J1, seeded from the relaxed ``C``.

    The relaxation is loose (fractional rows shrink mapped edges to any
    length), so plain rounding is refined by swap local search on the discrete
    objective, started from the rounded ``C`` and from the best unary-only
    assignment; the better of the two is returned.
    """
    C = _values(C)
    D = np.asarray(D, dtype=float)
    _check_shapes(C, g1, g2, D)
    m, n = C.shape
    transposed = m > n
    if transposed:
        # search over the smaller side; J1 is evaluated in the original layout
        def score(cols):
            return _j1(_perm_matrix(cols, np.arange(n), (m, n)), g1, g2, D, cfg)[0]

        starts = [linear_sum_assignment(-C.T)[1], linear_sum_assignment(D.T)[1]]
        size, pool = n, m
    else:
        def score(cols):
            return _j1(_perm_matrix(np.arange(m), cols, (m, n)), g1, g2, D, cfg)[0]

        starts = [linear_sum_assignment(-C)[1], linear_sum_assignment(D)[1]]
        size, pool = m, n
    best_cols, best_f = None, np.inf
    for start in starts:
        cols, f = _swap_search(np.asarray(start), score, pool)
        if f < best_f:
            best_cols, best_f = cols, f
    if transposed:
        S = _perm_matrix(best_cols, np.arange(size), (m, n))
    else:
        S = _perm_matrix(np.arange(size), best_cols, (m, n))
    return CorrespondenceMatrix(S, "discrete")


def uniform_init(m: int, n: int) -> CorrespondenceMatrix:
    """Constant matrix with row sums ``min(1, n/m)`` and column sums ``min(1, m/n)``."""
    return CorrespondenceMatrix(np.full((m, n), 1.0 / max(m, n)))


def feature_init(D: np.ndarray, tau: float = 0.1, sinkhorn_iters: int = 50) -> CorrespondenceMatrix:
    """Soft assignment ``exp(-D / tau)`` balanced to the same marginals as :func:`uniform_init`.

    A constant start maps every graph-1 node onto the same point, where the
    edge-length terms have no usable gradient; weighting by feature affinity
    separates the mapped nodes from the first iteration on.
    """
    D = np.asarray(D, dtype=float)
    m, n = D.shape
    K = np.exp(-(D - D.min()) / tau)
    r_target, c_target = min(1.0, n / m), min(1.0, m / n)
    for _ in range(sinkhorn_iters):
        K *= (r_target / K.sum(axis=1))[:, None]
        K *= (c_target / K.sum(axis=0))[None, :]
    K /= max(1.0, K.sum(axis=1).max(), K.sum(axis=0).max())
    return CorrespondenceMatrix(K)


# ---------------------------------------------------------------- J1


def _pairwise_term(C, V2, V1_len, edges, weights):
    """``sum w (|V1 edge| - |(C V2) edge|)^2`` and its gradient w.r.t. C.

    ``V2`` is centered first: with unequal row sums the mapped edge
    ``(C V2)_i - (C V2)_j`` would otherwise depend on the coordinate origin.
    """
    V2 = V2 - V2.mean(axis=0)
    P = C @ V2
    e = P[edges[:, 0]] - P[edges[:, 1]]
    ell = np.linalg.norm(e, axis=1)
    r = V1_len - ell
    val = float(np.sum(weights * r * r))
    # zero-length mapped edges: use the zero subgradient
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(ell[:, None] > 0, e / ell[:, None], 0.0)
    coef = (-2.0 * weights * r)[:, None] * unit
    GP = np.zeros_like(P)
    np.add.at(GP, edges[:, 0], coef)
    np.add.at(GP, edges[:, 1], -coef)
    return val, GP @ V2.T


def _edge_weights(g1: KeypointGraph):
    e = g1.edges
    return g1.adjacency_feat[e[:, 0], e[:, 1]], g1.adjacency_euclid[e[:, 0], e[:, 1]]


def objective_j1(C, g1: KeypointGraph, g2: KeypointGraph, D, cfg: GmConfig) -> float:
    """Node dissimilarity plus feature- and Euclidean-domain edge-length disagreement."""
    C = _values(C)
    _check_shapes(C, g1, g2, D)
    return _j1(C, g1, g2, np.asarray(D, dtype=float), cfg)[0]


def gradient_j1(C, g1: KeypointGraph, g2: KeypointGraph, D, cfg: GmConfig) -> np.ndarray:
    C = _values(C)
    _check_shapes(C, g1, g2, D)
    return _j1(C, g1, g2, np.asarray(D, dtype=float), cfg)[1]


def _j1(C, g1, g2, D, cfg):
    wf, we = _edge_weights(g1)
    val = float(np.sum(C * D))
    grad = D.copy()
    if cfg.alpha1:
        v, g = _pairwise_term(C, g2.features, g1.edge_len_feat, g1.edges, wf)
        val += cfg.alpha1 * v
        grad += cfg.alpha1 * g
    if cfg.alpha2:
        v, g = _pairwise_term(C, g2.positions, g1.edge_len_euclid, g1.edges, we)
        val += cfg.alpha2 * v
        grad += cfg.alpha2 * g
    return val, grad


# ---------------------------------------------------------------- Frank-Wolfe


@dataclass
class FWTrace:
    """Per-iteration record: iteration index, objective after the step, step size."""

    rows: list = field(default_factory=list)

    def append(self, it: int, objective: float, gamma: float) -> None:
        self.rows.append((it, objective, gamma))

    @property
    def objectives(self) -> list:
        return [r[1] for r in self.rows]

    def write(self, path: str) -> None:
        with open(path, "w", newline="\n") as fh:
            for it, obj, gamma in self.rows:
                fh.write(f"{it} {obj:.12e} {gamma:.12f}\n")


def _golden_section(phi: Callable[[float], float], iters: int = GOLDEN_ITERS):
    """Minimize ``phi`` on [0, 1]; endpoints compete with the interior estimate."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = 0.0, 1.0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = phi(c), phi(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = phi(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = phi(d)
    best = (fc, c) if fc <= fd else (fd, d)
    f1 = phi(1.0)
    if f1 <= best[0]:
        best = (f1, 1.0)
    return best[1], best[0]


def _fw_loop(C0, fun, max_iters, tol, trace: Optional[FWTrace]):
    C = _values(C0).copy()
    f, g = fun(C)
    f_start = f
    for it in range(max_iters):
        S = _assign_negative(g, strict=False)
        Dir = S - C
        gap = -float(np.sum(g * Dir))
        if gap <= 0:
            break
        gamma, f_new = _golden_section(lambda x: fun(C + x * Dir)[0])
        if f_new > f:
            gamma, f_new = 0.0, f
        if gamma > 0:
            C = np.clip(C + gamma * Dir, 0.0, 1.0)
            f_new, g = fun(C)
        if trace is not None:
            trace.append(it, f_new, gamma)
        change = abs(f - f_new) / max(abs(f), abs(f_start), 1e-300)
        f = f_new
        if gamma == 0 or change < tol:
            break
    return CorrespondenceMatrix(C)


def frank_wolfe(
    g1: KeypointGraph,
    g2: KeypointGraph,
    D,
    cfg: GmConfig,
    C0=None,
    trace: Optional[FWTrace] = None,
) -> CorrespondenceMatrix:
    """Minimize J1 over the partial-permutation hull from ``C0`` (default :func:`feature_init`)."""
    D = np.asarray(D, dtype=float)
    C0 = feature_init(D) if C0 is None else C0
    if not is_relaxed_feasible(_values(C0)):
        raise ValueError("C0 is not a feasible relaxed correspondence")
    _check_shapes(_values(C0), g1, g2, D)
    return _fw_loop(C0, lambda C: _j1(C, g1, g2, D, cfg), cfg.max_fw_iters, cfg.fw_tol, trace)


# ---------------------------------------------------------------- J2


def laplacian(A: np.ndarray) -> np.ndarray:
    return np.diag(A.sum(axis=1)) - A


def transformed_adjacency(g1: KeypointGraph, g2: KeypointGraph, to_g2) -> np.ndarray:
    """Gaussian adjacency of graph-1 nodes carried into graph 2's frame.

    The bandwidth is graph 2's median edge length, so a scale mismatch in the
    transform shows up in the weights.
    """
    P = to_g2(g1.positions)
    sigma = float(np.median(g2.edge_len_euclid)) if len(g2.edge_len_euclid) else None
    return gaussian_adjacency(P, g1.edges, sigma)


def _j2(C, V2, anchor, L, D, u, alpha3):
    m, n = C.shape
    X = C @ V2 - anchor
    LX = L @ X
    val = float(np.sum(C * D)) + u * (m + n - 2.0 * C.sum()) + alpha3 * float(np.sum(X * LX))
    grad = D - 2.0 * u + 2.0 * alpha3 * LX @ V2.T
    return val, grad


def objective_j2(C, g2: KeypointGraph, D, incumbent, L, cfg: GmConfig) -> float:
    """Unary cost with unmatched penalties plus Laplacian smoothness of offsets from ``incumbent``."""
    C = _values(C)
    cfg = cfg.resolve(D)
    anchor = _values(incumbent) @ g2.positions
    return _j2(C, g2.positions, anchor, L, np.asarray(D, dtype=float), cfg.unmatched_cost, cfg.alpha3)[0]


def gradient_j2(C, g2: KeypointGraph, D, incumbent, L, cfg: GmConfig) -> np.ndarray:
    C = _values(C)
    cfg = cfg.resolve(D)
    anchor = _values(incumbent) @ g2.positions
    return _j2(C, g2.positions, anchor, L, np.asarray(D, dtype=float), cfg.unmatched_cost, cfg.alpha3)[1]


def refine_j2(
    C_init,
    g1: KeypointGraph,
    g2: KeypointGraph,
    D,
    transform,
    cfg: GmConfig,
    incumbent=None,
    trace: Optional[FWTrace] = None,
) -> CorrespondenceMatrix:
    """Re-solve the correspondence with the offsets of ``incumbent`` held smooth.

    ``transform`` maps graph-1 coordinates into graph 2's frame and defines
    the adjacency of the transformed nodes; ``incumbent`` defaults to
    ``C_init``.
    """
    D = np.asarray(D, dtype=float)
    C0 = _values(C_init)
    _check_shapes(C0, g1, g2, D)
    cfg = cfg.resolve(D)
    anchor = _values(incumbent if incumbent is not None else C_init) @ g2.positions
    L = laplacian(transformed_adjacency(g1, g2, transform))
    fun = lambda C: _j2(C, g2.positions, anchor, L, D, cfg.unmatched_cost, cfg.alpha3)  # noqa: E731
    return _fw_loop(C0, fun, cfg.max_fw_iters, cfg.fw_tol, trace)


# ---------------------------------------------------------------- affinity oracle


def affinity_matrix(g1: KeypointGraph, g2: KeypointGraph, D, cfg: GmConfig) -> np.ndarray:
    """Dense ``mn x mn`` affinity; entry ``(i*n + a, j*n + b)`` scores matching i->a and j->b.

    Diagonal: node similarity ``1 - D``. Off-diagonal (``(i, j)`` a graph-1
    edge, ``a != b``): Gaussian agreement of the graph-1 edge length with the
    graph-2 distance, per domain, weighted by the graph-1 adjacency.
    """
    m, n = len(g1), len(g2)
    if m * n > 400:
        raise TooLarge(f"affinity matrix would be {m * n}x{m * n}")
    D = np.asarray(D, dtype=float)
    M = np.zeros((m * n, m * n))
    M[np.arange(m * n), np.arange(m * n)] = (1.0 - D).ravel()
    d2e = np.linalg.norm(g2.positions[:, None] - g2.positions[None], axis=-1)
    d2f = np.linalg.norm(g2.features[:, None] - g2.features[None], axis=-1)
    se = float(np.median(g1.edge_len_euclid)) if len(g1.edges) else 1.0
    sf = float(np.median(g1.edge_len_feat)) if len(g1.edges) else 1.0
    se = se if se > 0 else 1.0
    sf = sf if sf > 0 else 1.0
    off = ~np.eye(n, dtype=bool)
    for (i, j), le, lf in zip(g1.edges, g1.edge_len_euclid, g1.edge_len_feat):
        block = cfg.alpha1 * g1.adjacency_feat[i, j] * np.exp(-(((lf - d2f) / sf) ** 2))
        block = block + cfg.alpha2 * g1.adjacency_euclid[i, j] * np.exp(-(((le - d2e) / se) ** 2))
        block = np.where(off, block, 0.0)
        M[i * n : (i + 1) * n, j * n : (j + 1) * n] = block
        M[j * n : (j + 1) * n, i * n : (i + 1) * n] = block.T
    return M


def affinity_objective_oracle(C, g1: KeypointGraph, g2: KeypointGraph, D, cfg: GmConfig) -> float:
    """``vec(C)^T M vec(C)`` with the dense affinity; for small instances only."""
    C = _values(C)
    M = affinity_matrix(g1, g2, D, cfg)
    x = C.ravel()
    return float(x @ M @ x)
