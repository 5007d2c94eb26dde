"""Keypoint graphs and the matrices the matching objectives consume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .descriptor import DescriptorSet
from .errors import TooFewValidKeypoints
from .keypoints import KeypointSet


@dataclass(frozen=True, eq=False)
class KeypointGraph:
    positions: np.ndarray  # (m, 3)
    features: np.ndarray  # (m, d)
    edges: np.ndarray  # (E, 2), i < j
    edge_len_euclid: np.ndarray
    edge_len_feat: np.ndarray
    adjacency_euclid: np.ndarray  # (m, m)
    adjacency_feat: np.ndarray
    keypoint_index: np.ndarray  # row in the KeypointSet each node came from

    def __len__(self) -> int:
        return len(self.positions)


def knn_edges(positions: np.ndarray, k: int) -> np.ndarray:
    """Symmetrized k-nearest-neighbor edge list, sorted, with i < j."""
    m = len(positions)
    k = min(k, m - 1)
    if k < 1:
        return np.zeros((0, 2), dtype=np.int64)
    _, idx = cKDTree(positions).query(positions, k=k + 1)
    pairs = set()
    for i in range(m):
        for j in idx[i, 1:]:
            j = int(j)
            if j != i:
                pairs.add((min(i, j), max(i, j)))
    return np.asarray(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def gaussian_adjacency(values: np.ndarray, edges: np.ndarray, sigma: float | None = None) -> np.ndarray:
    """Symmetric ``exp(-len^2 / sigma^2)`` weights on the edge set.

    ``sigma`` defaults to the median edge length; with a zero bandwidth all
    zero-length edges get weight 1.
    """
    m = len(values)
    lens = np.linalg.norm(values[edges[:, 0]] - values[edges[:, 1]], axis=1)
    if sigma is None:
        sigma = float(np.median(lens)) if len(lens) else 0.0
    if sigma > 0:
        w = np.exp(-((lens / sigma) ** 2))
    else:
        w = (lens == 0).astype(float)
    A = np.zeros((m, m))
    A[edges[:, 0], edges[:, 1]] = w
    A[edges[:, 1], edges[:, 0]] = w
    return A


def build_graph(keypoints: KeypointSet, descriptors: DescriptorSet, k_nn: int = 8) -> KeypointGraph:
    if k_nn < 2:
        raise ValueError("k_nn must be >= 2")
    valid = np.flatnonzero(descriptors.valid)
    if len(valid) < 4:
        raise TooFewValidKeypoints(f"{len(valid)} valid keypoints, need at least 4")
    return graph_from_arrays(keypoints.positions[valid], descriptors.features[valid], k_nn, valid)


def graph_from_arrays(positions, features, k_nn: int = 8, keypoint_index=None) -> KeypointGraph:
    positions = np.asarray(positions, dtype=float)
    features = np.asarray(features, dtype=float)
    if len(positions) < 1:
        raise TooFewValidKeypoints("a graph needs at least one node")
    edges = knn_edges(positions, k_nn)
    e_len = np.linalg.norm(positions[edges[:, 0]] - positions[edges[:, 1]], axis=1)
    f_len = np.linalg.norm(features[edges[:, 0]] - features[edges[:, 1]], axis=1)
    if keypoint_index is None:
        keypoint_index = np.arange(len(positions))
    return KeypointGraph(
        positions,
        features,
        edges,
        e_len,
        f_len,
        gaussian_adjacency(positions, edges),
        gaussian_adjacency(features, edges),
        np.asarray(keypoint_index, dtype=np.int64),
    )


def node_dissimilarity(g1: KeypointGraph, g2: KeypointGraph) -> np.ndarray:
    """Feature distances between all node pairs, scaled so the maximum is 1."""
    D = cdist(g1.features, g2.features)
    top = D.max() if D.size else 0.0
    return D / top if top > 0 else D
