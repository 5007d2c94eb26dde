from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from gmreg.cloud_io import PointCloud
from gmreg.errors import TooFewPoints
from gmreg.keypoints import ISSConfig, detect_iss, scatter_eigenvalues


def cube_surface(step=0.05, size=1.0):
    ticks = np.round(np.arange(0, size + step / 2, step), 9)
    pts = {p for p in itertools.product(ticks, repeat=3) if min(p) == 0 or max(p) == size}
    return np.array(sorted(pts))


def brute_eigs(points, i, radius):
    """Weighted scatter eigenvalues of one point, straight from the definition."""
    d2 = np.sum((points - points[i]) ** 2, axis=1)
    nb = np.flatnonzero(d2 <= radius**2)
    w = np.array([1.0 / np.sum(np.sum((points - points[j]) ** 2, axis=1) <= radius**2) for j in nb])
    cov = np.zeros((3, 3))
    for wj, j in zip(w, nb):
        v = points[j] - points[i]
        cov += wj * np.outer(v, v)
    return np.sort(np.linalg.eigvalsh(cov / w.sum()))[::-1]


def test_scatter_matches_brute_force():
    pts = np.random.default_rng(0).random((120, 3))
    eig, _ = scatter_eigenvalues(pts, 0.3)
    for i in (0, 17, 99):
        np.testing.assert_allclose(eig[i], brute_eigs(pts, i, 0.3), rtol=1e-10, atol=1e-15)


def test_plane_has_no_keypoints():
    g = np.array(list(itertools.product(np.arange(20) * 0.1, np.arange(20) * 0.1, [0.0])))
    kp = detect_iss(PointCloud(g), ISSConfig(0.35, 0.2))
    assert len(kp) == 0


def test_cube_corners_beat_faces():
    pts = cube_surface()
    eig, _ = scatter_eigenvalues(pts, 0.15)
    for i in (0, 17, 400):
        np.testing.assert_allclose(eig[i], brute_eigs(pts, i, 0.15), rtol=1e-10, atol=1e-15)
    dist_to_edge = np.sort(np.minimum(pts, 1.0 - pts), axis=1)[:, 1]
    face = dist_to_edge > 0.2
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    for c in corners:
        region = np.linalg.norm(pts - c, axis=1) <= 0.1
        assert eig[region, 2].max() > 1.5 * eig[face, 2].max()


def test_cube_detects_corners():
    pts = cube_surface()
    kp = detect_iss(PointCloud(pts), ISSConfig(0.2, 0.3))
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    d = np.linalg.norm(kp.positions[:, None] - corners[None], axis=-1)
    assert len(kp) == 8
    assert d.min(axis=1).max() < 0.1
    assert len(set(d.argmin(axis=1).tolist())) == 8


def test_keypoint_invariants():
    pts = cube_surface(0.1)
    cloud = PointCloud(pts + np.random.default_rng(1).normal(scale=0.005, size=pts.shape))
    cfg = ISSConfig(0.3, 0.2).resolve(cloud)
    kp = detect_iss(cloud, cfg)
    assert len(kp) > 0
    assert len(np.unique(kp.indices)) == len(kp)
    assert np.all(np.diff(kp.indices) > 0)
    np.testing.assert_array_equal(kp.positions, cloud.points[kp.indices])
    assert np.all(kp.saliency > 0)
    eig, _ = scatter_eigenvalues(cloud.points, cfg.salient_radius)
    l1, l2, l3 = eig[kp.indices].T
    assert np.all(l2 / l1 < cfg.gamma21) and np.all(l3 / l2 < cfg.gamma32)
    # no surviving keypoint has a more salient keypoint within the suppression radius
    for a, p in zip(kp.indices, kp.positions):
        close = kp.indices[np.linalg.norm(kp.positions - p, axis=1) <= cfg.nms_radius]
        assert eig[a, 2] >= eig[close, 2].max()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_equivariance(seed):
    rng = np.random.default_rng(seed)
    pts = cube_surface(0.1) + rng.normal(scale=0.01, size=(602, 3))
    R = Rotation.random(random_state=seed).as_matrix()
    t = rng.normal(size=3)
    cfg = ISSConfig(0.3, 0.2)
    a = detect_iss(PointCloud(pts), cfg)
    b = detect_iss(PointCloud(pts @ R.T + t), cfg)
    assert len(a) == len(b)
    np.testing.assert_array_equal(a.indices, b.indices)
    np.testing.assert_allclose(a.positions @ R.T + t, b.positions, atol=1e-6)


def test_ties_go_to_lower_index():
    # two identical clusters: mirrored points share saliency, the lower index survives
    rng = np.random.default_rng(5)
    blob = rng.normal(size=(40, 3)) * [1.0, 0.6, 0.3]
    pts = np.vstack([blob, blob[:, [0, 1, 2]] * [-1, 1, 1]])
    kp = detect_iss(PointCloud(pts), ISSConfig(1.5, 50.0, min_neighbors=5))
    assert len(kp) == 1


def test_errors():
    with pytest.raises(TooFewPoints):
        detect_iss(PointCloud(np.random.default_rng(0).random((5, 3))), ISSConfig(1.0, 1.0))
    with pytest.raises(ValueError):
        detect_iss(PointCloud(np.random.default_rng(0).random((50, 3))), ISSConfig(1.0, 1.0, gamma21=1.2))
    with pytest.raises(ValueError):
        detect_iss(PointCloud(np.random.default_rng(0).random((50, 3))), ISSConfig(1.0, 1.0, min_neighbors=3))


def test_default_radii_from_spacing():
    pts = cube_surface(0.1)
    cfg = ISSConfig().resolve(PointCloud(pts))
    assert cfg.salient_radius == pytest.approx(0.6)
    assert cfg.nms_radius == pytest.approx(0.4)
