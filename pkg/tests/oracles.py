"""Independent reference implementations used by the unit and acceptance tests."""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
from scipy.spatial.transform import Rotation

from gmreg.graph import graph_from_arrays
from gmreg.matching import GmConfig


def best_partial_assignment(cost, unmatched_cost):
    """Exact minimum over all partial assignments, by exhaustive search over used-column sets.

    Each row either takes a free column or stays unmatched; memoized over
    (row, used-columns mask), which enumerates every partial injection.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    m, n = cost.shape

    @lru_cache(maxsize=None)
    def go(i, used):
        if i == m:
            return (n - bin(used).count("1")) * unmatched_cost
        best = unmatched_cost + go(i + 1, used)
        for j in range(n):
            if not used >> j & 1:
                best = min(best, cost[i, j] + go(i + 1, used | 1 << j))
        return best

    return go(0, 0)


def naive_j1(C, g1, g2, D, cfg):
    """Term-by-term J1 with uncentered mapped coordinates (valid when every row of C sums to 1)."""
    m, n = C.shape
    val = sum(C[i, j] * D[i, j] for i in range(m) for j in range(n))
    for (a, b), wf, we in zip(
        g1.edges,
        g1.adjacency_feat[g1.edges[:, 0], g1.edges[:, 1]],
        g1.adjacency_euclid[g1.edges[:, 0], g1.edges[:, 1]],
    ):
        for V1, V2, w, alpha in ((g1.features, g2.features, wf, cfg.alpha1), (g1.positions, g2.positions, we, cfg.alpha2)):
            ma = sum(C[a, j] * V2[j] for j in range(n))
            mb = sum(C[b, j] * V2[j] for j in range(n))
            diff = np.linalg.norm(V1[a] - V1[b]) - np.linalg.norm(ma - mb)
            val += alpha * w * diff * diff
    return val


def permutation_matrices(n):
    for perm in itertools.permutations(range(n)):
        S = np.zeros((n, n))
        S[np.arange(n), perm] = 1.0
        yield perm, S


def random_doubly_stochastic(rng, n, iters=200):
    K = rng.random((n, n)) + 0.1
    for _ in range(iters):
        K /= K.sum(axis=1, keepdims=True)
        K /= K.sum(axis=0, keepdims=True)
    return K


def graph_pair(seed, m, noise=0.05, k_nn=3, d=6):
    """Graph 1 and a rotated, shifted, noisy, relabeled copy; returns (g1, g2, perm)."""
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(m, 3))
    F = rng.random((m, d))
    perm = rng.permutation(m)
    R = Rotation.random(random_state=seed).as_matrix()
    P2 = (P @ R.T + rng.normal(size=3))[perm] + rng.normal(scale=noise, size=(m, 3))
    F2 = F[perm] + rng.normal(scale=noise, size=(m, d))
    return graph_from_arrays(P, F, k_nn), graph_from_arrays(P2, F2, k_nn), perm


DEFAULT_GM = GmConfig()
