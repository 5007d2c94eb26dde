from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist
from scipy.spatial.transform import Rotation

from gmreg import sh
from gmreg.cloud_io import PointCloud
from gmreg.descriptor import (
    DescriptorConfig,
    ShHogField,
    compute_invariants,
    compute_sh_hog,
    describe_keypoints,
    extract_patch,
    kernel_density,
    sh_coefficients,
    splat,
    write_descriptors,
)
from gmreg.errors import EmptyPatch, UnsupportedDegree
from gmreg.evalkit import generate_scene
from gmreg.keypoints import ISSConfig, KeypointSet, detect_iss


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ---------------------------------------------------------------- basis


def test_schmidt_band_sums_to_one():
    d = unit(np.random.default_rng(0).normal(size=(200, 3)))
    Y = sh.real_sh(4, d)
    for l in range(5):
        np.testing.assert_allclose(np.sum(Y[:, sh.band_slice(l)] ** 2, axis=1), 1.0, atol=1e-12)


def test_low_degree_closed_forms():
    d = unit(np.random.default_rng(1).normal(size=(50, 3)))
    x, y, z = d.T
    Y = sh.real_sh(2, d)
    np.testing.assert_allclose(Y[:, 0], 1.0)
    # band 1 is the direction itself, ordered (y, z, x)
    np.testing.assert_allclose(Y[:, 1:4], np.column_stack([y, z, x]), atol=1e-12)
    np.testing.assert_allclose(Y[:, 6], 0.5 * (3 * z * z - 1), atol=1e-12)
    np.testing.assert_allclose(Y[:, 8], np.sqrt(3) / 2 * (x * x - y * y), atol=1e-12)
    np.testing.assert_allclose(Y[:, 4], np.sqrt(3) * x * y, atol=1e-12)


def fitted_rotation_matrix(l, R, rng):
    """Oracle: least-squares D with Y_l(R u) = D Y_l(u) over many directions."""
    u = unit(rng.normal(size=(400, 3)))
    A = sh.real_sh(l, u)[:, sh.band_slice(l)]
    B = sh.real_sh(l, u @ R.T)[:, sh.band_slice(l)]
    return np.linalg.lstsq(A, B, rcond=None)[0].T


@pytest.mark.parametrize("l", [1, 2, 3, 4])
def test_wigner_matches_fit(l):
    rng = np.random.default_rng(l)
    for k in range(3):
        R = Rotation.random(random_state=10 * l + k).as_matrix()
        D = sh.wigner_d_real(l, R)
        np.testing.assert_allclose(D, fitted_rotation_matrix(l, R, rng), atol=1e-10)
        np.testing.assert_allclose(D @ D.T, np.eye(2 * l + 1), atol=1e-12)


def test_rotate_band_examples():
    rng = np.random.default_rng(2)
    c = rng.normal(size=5)
    np.testing.assert_allclose(sh.rotate_sh_band(c, np.eye(3), 2), c, atol=1e-14)
    R = Rotation.random(random_state=3).as_matrix()
    np.testing.assert_allclose(sh.rotate_sh_band(np.array([0.7]), R, 0), [0.7])
    Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    pole = sh.real_sh(1, np.array([0.0, 0.0, 1.0]))[sh.band_slice(1)]
    np.testing.assert_allclose(sh.rotate_sh_band(pole, Rz, 1), pole, atol=1e-14)
    with pytest.raises(UnsupportedDegree):
        sh.wigner_d_real(5, R)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 2))
def test_band_covariance_analytic(seed, l):
    """Coefficients of a rotated gradient field are the rotated coefficients."""
    rng = np.random.default_rng(seed)
    grads = rng.normal(size=(30, 3))
    R = Rotation.random(random_state=seed).as_matrix()
    F = sh_coefficients(grads, 2)[:, sh.band_slice(l)]
    Fr = sh_coefficients(grads @ R.T, 2)[:, sh.band_slice(l)]
    np.testing.assert_allclose(Fr, sh.rotate_sh_band(F, R, l), atol=1e-6)


# ---------------------------------------------------------------- patches


def test_single_point_patch():
    cloud = PointCloud(np.zeros((1, 3)))
    p = extract_patch(cloud, np.zeros(3), 1.0, grid_size=5)
    assert p.grid[2, 2, 2] == pytest.approx(1.0)
    assert p.grid.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(p.gradients[2, 2, 2], 0.0, atol=1e-12)


def test_half_space_patch():
    ax = np.linspace(-1, 1, 81)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    g = g[(g[:, 0] < 0) & (np.linalg.norm(g, axis=1) < 1)]
    p = extract_patch(PointCloud(g), np.zeros(3), 1.0, grid_size=11)
    c = 5
    # along the central x-row the density drops from the filled side to the empty side
    assert np.all(p.gradients[c - 2 : c + 3, c, c, 0] <= 1e-9)
    assert p.gradients[c, c, c, 0] < 0
    np.testing.assert_allclose(p.gradients[c - 1 : c + 2, c, c, 1:], 0.0, atol=1e-6 * abs(p.gradients[c, c, c, 0]))


def test_rotated_points_splat_like_rotated_density():
    """Splat of rotated sample points vs the rotated density splatted from a fixed lattice.

    Both are quadratures of the same hat-kernel integral over the rotated
    density, so they may differ only by splatting/quadrature error.
    """
    G, radius = 11, 1.0
    h = 2 * radius / G
    ax = np.arange(-1, 1, h / 4) + h / 8
    P = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    A = np.diag(1 / np.array([0.3, 0.4, 0.35]) ** 2)

    def density(X):
        return np.exp(-0.5 * np.einsum("ni,ij,nj->n", X, A, X))

    for seed in range(3):
        R = Rotation.random(random_state=seed).as_matrix()
        moved = splat(P @ R.T, np.zeros(3), radius, G, density(P))
        ref = splat(P, np.zeros(3), radius, G, density(P @ R))
        assert np.linalg.norm(moved - ref) / np.linalg.norm(ref) < 0.02


def test_kernel_density_gradient_is_derivative():
    pts = np.random.default_rng(4).normal(scale=0.3, size=(40, 3))
    rho, grad = kernel_density(pts, np.zeros(3), 1.0, 11, 0.2)
    h = 2.0 / 11
    dx = 1e-5
    rp, _ = kernel_density(pts - [dx, 0, 0], np.zeros(3), 1.0, 11, 0.2)
    rm, _ = kernel_density(pts + [dx, 0, 0], np.zeros(3), 1.0, 11, 0.2)
    np.testing.assert_allclose(grad[..., 0], (rp - rm) / (2 * dx), rtol=1e-5, atol=1e-8 * np.abs(grad).max())
    # total mass is preserved on a grid fine enough for the bandwidth
    assert rho.sum() == pytest.approx(40.0, rel=0.05)
    assert h < 0.2


def test_empty_patch():
    with pytest.raises(EmptyPatch):
        extract_patch(PointCloud(np.ones((3, 3)) * 5), np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        extract_patch(PointCloud(np.zeros((3, 3))), np.zeros(3), 1.0, grid_size=6)


# ---------------------------------------------------------------- sh-hog field


def test_pole_gradient_coefficient():
    F = sh_coefficients(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]), 3)
    assert F[0, 0] == pytest.approx(1.0 / (4 * np.pi))
    np.testing.assert_array_equal(F[1], 0.0)


def test_uniform_field_constant_inside():
    from gmreg.descriptor import VoxelPatch

    G = 11
    grads = np.zeros((G, G, G, 3))
    grads[..., 2] = 1.0
    p = VoxelPatch(np.zeros(3), 1.0, np.ones((G, G, G)), grads)
    f = compute_sh_hog(p, 3, 0.1)
    inner = f.coeffs[4:7, 4:7, 4:7]
    np.testing.assert_allclose(inner, np.broadcast_to(inner[1, 1, 1], inner.shape), rtol=1e-9)


def test_zero_field_flagged():
    G = 7
    field = ShHogField(np.zeros((G, G, G, 16)), 3, 0.1, 1.0, 2.0 / G)
    f, ok = compute_invariants(field, 2)
    assert not ok
    np.testing.assert_array_equal(f, 0.0)


@pytest.fixture(scope="module")
def room():
    sc = generate_scene("cube-room", 2000, seed=0)
    iss = ISSConfig().resolve(sc.source)
    cfg = DescriptorConfig().resolve(iss.salient_radius)
    return sc, iss, cfg


def feature_at(cloud, c, cfg, weights=None):
    patch = extract_patch(cloud, c, cfg.radius, cfg.grid_size, weights, smoothing=cfg.smoothing)
    return compute_invariants(compute_sh_hog(patch, cfg.L, cfg.kernel_sigma), cfg.n_max, cfg.profile_sigma)[0]


def test_rotation_invariance_sample(room):
    sc, iss, cfg = room
    kp = detect_iss(sc.source, iss)
    rng = np.random.default_rng(11)
    pts = sc.source.points
    for c in kp.positions[rng.choice(len(kp), 3, replace=False)]:
        f0 = feature_at(sc.source, c, cfg)
        for _ in range(5):
            R = Rotation.random(random_state=rng.integers(2**31)).as_matrix()
            f1 = feature_at(PointCloud((pts - c) @ R.T + c), c, cfg)
            assert np.linalg.norm(f1 - f0) / np.linalg.norm(f0) <= 0.05


def test_density_scale_invariance(room):
    sc, iss, cfg = room
    c = detect_iss(sc.source, iss).positions[0]
    w = np.ones(len(sc.source))
    np.testing.assert_allclose(feature_at(sc.source, c, cfg, 2.0 * w), feature_at(sc.source, c, cfg, w), atol=1e-9)
    np.testing.assert_allclose(feature_at(sc.source, c, cfg, 7.5 * w), feature_at(sc.source, c, cfg, w), atol=1e-9)


def test_descriptor_set_shape_and_determinism(room):
    sc, iss, cfg = room
    kp = detect_iss(sc.source, iss)
    a = describe_keypoints(sc.source, kp, cfg)
    b = describe_keypoints(sc.source, kp, cfg)
    assert a.dim == cfg.dim == 8
    assert a.valid.all()
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_allclose(np.linalg.norm(a.features, axis=1), 1.0)


def test_duplicated_patch_identical_features(room):
    _, _, cfg = room
    rng = np.random.default_rng(5)
    blob = rng.normal(scale=0.2, size=(300, 3))
    shift = np.array([20.0, 0, 0])
    cloud = PointCloud(np.vstack([blob, blob + shift]))
    kp = KeypointSet.from_indices(cloud, [0, 300], [1.0, 1.0])
    d = describe_keypoints(cloud, kp, cfg)
    np.testing.assert_allclose(d.features[0], d.features[1], atol=1e-9)


def test_zero_weights_all_invalid(room):
    sc, iss, cfg = room
    kp = detect_iss(sc.source, iss)
    d = describe_keypoints(sc.source, kp, cfg, weights=np.zeros(len(sc.source)))
    assert not d.valid.any()
    np.testing.assert_array_equal(d.features, 0.0)


def test_true_pairs_are_nearest(room):
    sc, iss, cfg = room
    ks, kt = detect_iss(sc.source, iss), detect_iss(sc.target, iss)
    ds, dt = describe_keypoints(sc.source, ks, cfg), describe_keypoints(sc.target, kt, cfg)
    gt = dict(map(tuple, sc.true_correspondence))
    where = {t: k for k, t in enumerate(kt.indices)}
    pairs = [(i, where[gt[s]]) for i, s in enumerate(ks.indices) if gt[s] in where]
    assert len(pairs) == len(ks)
    D = cdist(ds.features, dt.features)
    hits = [D[i, j] < np.delete(D[i], j).min() for i, j in pairs]
    assert np.mean(hits) >= 0.9


def test_write_descriptors(tmp_path, room):
    sc, iss, cfg = room
    kp = detect_iss(sc.source, iss)
    d = describe_keypoints(sc.source, kp, cfg)
    path = tmp_path / "d.txt"
    write_descriptors(d, str(path), kp.indices)
    rows = np.loadtxt(path)
    assert rows.shape == (len(kp), 1 + cfg.dim)
    np.testing.assert_array_equal(rows[:, 0], kp.indices)
    np.testing.assert_allclose(rows[:, 1:], d.features, atol=1e-11)
