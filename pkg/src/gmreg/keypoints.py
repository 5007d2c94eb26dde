"""Intrinsic Shape Signatures keypoint detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import PointCloud, mean_spacing
from .errors import TooFewPoints


@dataclass(frozen=True)
class ISSConfig:
    salient_radius: float | None = None  # None: 6x mean point spacing
    nms_radius: float | None = None  # None: 4x mean point spacing
    gamma21: float = 0.975
    gamma32: float = 0.975
    min_neighbors: int = 5

    def resolve(self, cloud: PointCloud) -> "ISSConfig":
        if self.salient_radius is not None and self.nms_radius is not None:
            return self
        spacing = mean_spacing(cloud.points)
        return ISSConfig(
            self.salient_radius if self.salient_radius is not None else 6.0 * spacing,
            self.nms_radius if self.nms_radius is not None else 4.0 * spacing,
            self.gamma21,
            self.gamma32,
            self.min_neighbors,
        )


@dataclass(frozen=True, eq=False)
class KeypointSet:
    indices: np.ndarray
    positions: np.ndarray
    saliency: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def from_indices(cls, cloud: PointCloud, indices, saliency) -> "KeypointSet":
        indices = np.asarray(indices, dtype=np.int64)
        return cls(indices, cloud.points[indices].copy(), np.asarray(saliency, dtype=float))


def scatter_eigenvalues(points: np.ndarray, radius: float):
    """Density-weighted scatter eigenvalues (descending) around every point.

    Returns ``(eigvals, neighbor_lists)``; each neighbor ``j`` is weighted by
    ``1 / |N(j)|`` so densely sampled regions do not dominate.
    """
    tree = cKDTree(points)
    nbrs = tree.query_ball_point(points, radius)
    counts = np.array([len(n) for n in nbrs], dtype=float)
    weights = 1.0 / counts
    eig = np.zeros((len(points), 3))
    for i, nb in enumerate(nbrs):
        nb = np.asarray(nb)
        d = points[nb] - points[i]
        w = weights[nb]
        cov = (d * w[:, None]).T @ d / w.sum()
        eig[i] = np.linalg.eigvalsh(cov)[::-1]
    return eig, nbrs


def detect_iss(cloud: PointCloud, cfg: ISSConfig | None = None) -> KeypointSet:
    cfg = (cfg or ISSConfig()).resolve(cloud)
    if not (cfg.salient_radius > 0 and cfg.nms_radius > 0):
        raise ValueError("radii must be positive")
    if not (0 < cfg.gamma21 < 1 and 0 < cfg.gamma32 < 1):
        raise ValueError("gamma ratios must lie in (0, 1)")
    if cfg.min_neighbors < 5:
        raise ValueError("min_neighbors must be >= 5")
    pts = cloud.points
    if len(pts) < cfg.min_neighbors + 1:
        raise TooFewPoints(f"{len(pts)} points, need at least {cfg.min_neighbors + 1}")

    eig, nbrs = scatter_eigenvalues(pts, cfg.salient_radius)
    l1, l2, l3 = eig.T
    n_nb = np.array([len(n) - 1 for n in nbrs])
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (
            (n_nb >= cfg.min_neighbors)
            & (l1 > 0)
            & (l2 > 0)
            & (l2 / l1 < cfg.gamma21)
            & (l3 / l2 < cfg.gamma32)
            # a numerically flat neighborhood is not salient
            & (l3 > 1e-12 * l1)
        )
    cand = np.flatnonzero(ok)
    if len(cand) == 0:
        return KeypointSet(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0))

    # non-maximum suppression on l3 among candidates; ties go to the lower index
    sal = l3[cand]
    ctree = cKDTree(pts[cand])
    keep = []
    for a, nb in enumerate(ctree.query_ball_point(pts[cand], cfg.nms_radius)):
        nb = np.asarray(nb)
        others = nb[nb != a]
        s = sal[a]
        if np.any(sal[others] > s):
            continue
        if np.any((sal[others] == s) & (cand[others] < cand[a])):
            continue
        keep.append(a)
    idx = cand[np.asarray(keep, dtype=np.int64)]
    return KeypointSet.from_indices(cloud, idx, l3[idx])
