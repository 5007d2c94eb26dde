"""Rotation-invariant keypoint descriptors from spherical-harmonic gradient fields.

A keypoint's neighborhood is splatted into a small voxel grid. Every voxel's
density gradient is expanded in real spherical harmonics, locally normalized
by the Gaussian-smoothed gradient energy, filtered with radial
Gaussian-derivative profiles and reduced to per-band power (the rank-0
coupling), which does not change under rotation of the patch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from . import sh
from .cloud_io import PointCloud
from .errors import EmptyPatch
from .keypoints import KeypointSet

log = logging.getLogger(__name__)

EPS_REL = 1e-8


@dataclass(frozen=True)
class DescriptorConfig:
    L: int = 3
    n_max: int = 2
    grid_size: int = 11
    radius: float | None = None  # None: 2x the detector's salient radius
    kernel_sigma: float | None = None  # None: radius / 4
    smoothing: float = 2.0  # density pre-smoothing, in voxels; 0 disables
    profile_sigma: float = 1.0 / 3.0  # radial filter width as a fraction of the radius

    def resolve(self, salient_radius: float) -> "DescriptorConfig":
        radius = self.radius if self.radius is not None else 2.0 * salient_radius
        sigma = self.kernel_sigma if self.kernel_sigma is not None else radius / 4.0
        return DescriptorConfig(self.L, self.n_max, self.grid_size, radius, sigma, self.smoothing, self.profile_sigma)

    @property
    def dim(self) -> int:
        return (self.L + 1) * self.n_max


@dataclass(frozen=True, eq=False)
class VoxelPatch:
    center: np.ndarray
    radius: float
    grid: np.ndarray  # (G, G, G) splatted mass
    gradients: np.ndarray  # (G, G, G, 3)

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    @property
    def voxel(self) -> float:
        return 2.0 * self.radius / self.size

    def offsets(self) -> np.ndarray:
        """Voxel-center positions relative to ``center``, shape (G, G, G, 3)."""
        G = self.size
        ax = (np.arange(G) - (G - 1) / 2.0) * self.voxel
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class ShHogField:
    coeffs: np.ndarray  # (G, G, G, (L+1)**2), normalized
    L: int
    kernel_sigma: float
    radius: float
    voxel: float

    def band(self, l: int) -> np.ndarray:
        return self.coeffs[..., sh.band_slice(l)]


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    features: np.ndarray  # (K, dim)
    valid: np.ndarray  # (K,) bool
    config: DescriptorConfig

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.features)


def splat(points: np.ndarray, center, radius: float, grid_size: int, weights=None) -> np.ndarray:
    """Trilinear splatting of point masses into a centered cubic grid."""
    G = grid_size
    h = 2.0 * radius / G
    u = (np.asarray(points, dtype=float) - center) / h + (G - 1) / 2.0
    w = np.ones(len(u)) if weights is None else np.asarray(weights, dtype=float)
    base = np.floor(u).astype(np.int64)
    frac = u - base
    grid = np.zeros((G, G, G))
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        cw = w * np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        inside = np.all((idx >= 0) & (idx < G), axis=1)
        np.add.at(grid, tuple(idx[inside].T), cw[inside])
    return grid


def kernel_density(points: np.ndarray, center, radius: float, grid_size: int, bandwidth: float, weights=None):
    """Gaussian kernel density and its exact gradient sampled at the voxel centers.

    The kernel integrates to one voxel volume per unit of point mass, so the
    values are on the same scale as :func:`splat`. Unlike a blurred trilinear
    splat, this field rotates exactly with the points; only its sampling is
    tied to the grid.
    """
    G = grid_size
    h = 2.0 * radius / G
    ax = (np.arange(G) - (G - 1) / 2.0) * h
    X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    rel = np.asarray(points, dtype=float) - center
    w = np.ones(len(rel)) if weights is None else np.asarray(weights, dtype=float)
    norm = h**3 / ((2.0 * np.pi) ** 1.5 * bandwidth**3)
    rho = np.zeros(len(X))
    grad = np.zeros((len(X), 3))
    for lo in range(0, len(rel), 256):
        diff = X[:, None, :] - rel[None, lo : lo + 256]
        k = w[None, lo : lo + 256] * np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * bandwidth**2))
        rho += k.sum(axis=1)
        grad -= np.einsum("vp,vpk->vk", k, diff) / bandwidth**2
    return (norm * rho).reshape(G, G, G), (norm * grad).reshape(G, G, G, 3)


def extract_patch(
    cloud: PointCloud,
    center,
    radius: float,
    grid_size: int = 11,
    weights=None,
    tree=None,
    smoothing: float = 0.0,
) -> VoxelPatch:
    """Voxelize the points within ``radius`` of ``center``.

    With ``smoothing == 0`` the density is the trilinear splat and the
    gradients are its central differences. A positive ``smoothing`` (in
    voxels) replaces both by a Gaussian kernel density of that bandwidth and
    its analytic gradient; the trilinear footprint is axis-aligned and leaks
    grid orientation into the gradients, which the smooth kernel avoids.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    if grid_size < 5 or grid_size % 2 == 0:
        raise ValueError("grid_size must be odd and >= 5")
    center = np.asarray(center, dtype=float)
    tree = tree if tree is not None else cKDTree(cloud.points)
    idx = np.asarray(tree.query_ball_point(center, radius), dtype=np.int64)
    if len(idx) == 0:
        raise EmptyPatch(f"no points within {radius} of {center.tolist()}")
    idx.sort()
    w = None if weights is None else np.asarray(weights, dtype=float)[idx]
    h = 2.0 * radius / grid_size
    if smoothing > 0:
        grid, grads = kernel_density(cloud.points[idx], center, radius, grid_size, smoothing * h, w)
    else:
        grid = splat(cloud.points[idx], center, radius, grid_size, w)
        grads = np.stack(np.gradient(grid, h), axis=-1)
    return VoxelPatch(center, float(radius), grid, grads)


def sh_coefficients(gradients: np.ndarray, L: int) -> np.ndarray:
    """Unnormalized per-voxel coefficients ``(2l+1)/(4 pi) * |d| * Y_lm(d)``."""
    mag = np.linalg.norm(gradients, axis=-1)
    Y = sh.real_sh(L, gradients)
    scale = np.concatenate([np.full(2 * l + 1, (2 * l + 1) / (4 * np.pi)) for l in range(L + 1)])
    out = mag[..., None] * Y * scale
    out[mag == 0] = 0.0
    return out


def compute_sh_hog(patch: VoxelPatch, L: int = 3, kernel_sigma: float | None = None) -> ShHogField:
    if L < 1:
        raise ValueError("L must be >= 1")
    kernel_sigma = patch.radius / 4.0 if kernel_sigma is None else kernel_sigma
    if not kernel_sigma > 0:
        raise ValueError("kernel_sigma must be positive")
    F = sh_coefficients(patch.gradients, L)
    energy = gaussian_filter(np.sum(patch.gradients**2, axis=-1), kernel_sigma / patch.voxel, mode="constant")
    eps = EPS_REL * float(energy.max()) if energy.max() > 0 else 1.0
    Fn = F / np.sqrt(energy + eps)[..., None]
    return ShHogField(Fn, L, float(kernel_sigma), patch.radius, patch.voxel)


def radial_profile(r: np.ndarray, n: int, sigma: float, radius: float) -> np.ndarray:
    """Order-``n`` Gaussian-derivative radial envelope, cut off at ``radius``."""
    x = r / sigma
    return np.where(r <= radius, x**n * np.exp(-0.5 * x * x), 0.0)


def compute_invariants(field: ShHogField, n_max: int = 2, profile_sigma: float = 1.0 / 3.0):
    """Per-band power of the radially filtered field at the patch center.

    The radial filters have width ``profile_sigma * radius``; at a third of
    the radius they have decayed to a few percent at the patch border, so the
    hard spherical cut does not leak grid orientation into the features.
    Returns ``(features, valid)``; an all-zero field yields the zero vector and
    ``valid=False``.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    G = field.coeffs.shape[0]
    ax = (np.arange(G) - (G - 1) / 2.0) * field.voxel
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    r = np.sqrt(X * X + Y * Y + Z * Z)
    sigma = field.radius * profile_sigma
    feats = []
    for n in range(1, n_max + 1):
        prof = radial_profile(r, n, sigma, field.radius)
        for l in range(field.L + 1):
            resp = np.tensordot(prof, field.band(l), axes=3)
            feats.append(float(resp @ resp))
    f = np.asarray(feats)
    norm = np.linalg.norm(f)
    if norm == 0 or not np.isfinite(norm):
        return np.zeros_like(f), False
    return f / norm, True


def describe_keypoints(cloud: PointCloud, keypoints: KeypointSet, cfg: DescriptorConfig, weights=None) -> DescriptorSet:
    """One descriptor per keypoint, in keypoint order. ``cfg`` must be resolved."""
    if cfg.radius is None:
        raise ValueError("descriptor config has no radius; call resolve() first")
    if len(keypoints) == 0:
        raise ValueError("no keypoints to describe")
    tree = cKDTree(cloud.points)
    feats = np.zeros((len(keypoints), cfg.dim))
    valid = np.zeros(len(keypoints), dtype=bool)
    for k, c in enumerate(keypoints.positions):
        try:
            patch = extract_patch(cloud, c, cfg.radius, cfg.grid_size, weights, tree, cfg.smoothing)
        except EmptyPatch:
            continue
        field = compute_sh_hog(patch, cfg.L, cfg.kernel_sigma)
        feats[k], valid[k] = compute_invariants(field, cfg.n_max, cfg.profile_sigma)
    if not valid.any():
        log.warning("no keypoint produced a valid descriptor")
    return DescriptorSet(feats, valid, cfg)


def write_descriptors(desc: DescriptorSet, path: str, indices=None) -> None:
    """One line per valid keypoint: index, then the feature values."""
    indices = np.arange(len(desc)) if indices is None else np.asarray(indices)
    with open(path, "w", newline="\n") as fh:
        for i, f, ok in zip(indices, desc.features, desc.valid):
            if ok:
                fh.write(f"{int(i)} " + " ".join(f"{v:.12f}" for v in f) + "\n")
