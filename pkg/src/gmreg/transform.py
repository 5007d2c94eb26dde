"""Similarity transforms: application, closed-form estimation, error metrics.

Points are column vectors throughout: ``p -> s * R @ p + t``. Arrays of
points are ``(N, 3)`` and therefore transformed as ``s * P @ R.T + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, InsufficientMatches


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    s: float = 1.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not self.s > 0:
            raise ValueError("scale must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a rotation matrix")
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "SimilarityTransform":
        M = np.asarray(M, dtype=float)
        A = M[:3, :3]
        s = float(np.cbrt(np.linalg.det(A)))
        R = A / s
        # re-orthonormalize values that went through decimal text
        U, _, Vt = np.linalg.svd(R)
        return cls(s, U @ Vt, M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M

    def apply(self, points) -> np.ndarray:
        return self.s * np.asarray(points, dtype=float) @ self.R.T + self.t

    __call__ = apply

    def inverse(self) -> "SimilarityTransform":
        Rt = self.R.T
        return SimilarityTransform(1.0 / self.s, Rt, -(Rt @ self.t) / self.s)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self o other``: apply ``other`` first."""
        return SimilarityTransform(self.s * other.s, self.R @ other.R, self.s * self.R @ other.t + self.t)


def apply(T: SimilarityTransform, points) -> np.ndarray:
    return T.apply(points)


def write_transform(T: SimilarityTransform, path: str) -> None:
    M = T.matrix()
    M = np.where(M == 0.0, 0.0, M)
    with open(path, "w", newline="\n") as fh:
        for row in M:
            fh.write(" ".join(f"{v:.15f}" for v in row) + "\n")


def read_transform(path: str) -> SimilarityTransform:
    with open(path) as fh:
        vals = [float(v) for v in fh.read().split()]
    if len(vals) != 16:
        raise ValueError(f"{path}: expected 16 values, got {len(vals)}")
    return SimilarityTransform.from_matrix(np.asarray(vals).reshape(4, 4))


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in radians.

    Same value as ``arccos((tr R - 1) / 2)`` but via atan2, which keeps full
    precision near zero where arccos loses half the digits.
    """
    R = np.asarray(R, dtype=float)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(skew), 0.5 * (np.trace(R) - 1.0)))


def random_rotation(rng: np.random.Generator, max_angle_deg: float = 180.0) -> np.ndarray:
    """Rotation about a uniform axis with angle uniform in [0, max_angle_deg]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_angle_deg))
    return axis_angle(axis, angle)


def axis_angle(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


@dataclass(frozen=True)
class RegistrationErrors:
    rotation_error: float  # degrees
    translation_error: float  # meters
    scale_error: float


def registration_errors(T_est: SimilarityTransform, T_gt: SimilarityTransform) -> RegistrationErrors:
    rot = np.degrees(rotation_angle(T_gt.R.T @ T_est.R))
    return RegistrationErrors(
        float(rot),
        float(np.linalg.norm(T_est.t - T_gt.t)),
        float(abs(T_est.s / T_gt.s - 1.0)),
    )


# ---------------------------------------------------------------- estimation


def _pairs_from_correspondence(C: np.ndarray, P1: np.ndarray, P2: np.ndarray):
    """Matched rows of graph 1, their weights and mapped graph-2 positions."""
    w = C.sum(axis=1)
    rows = np.flatnonzero(w > 1e-12)
    mapped = (C[rows] @ P2) / w[rows, None]
    return rows, w[rows], mapped


def weighted_similarity(
    X: np.ndarray,
    Y: np.ndarray,
    w: np.ndarray,
    dX: np.ndarray | None = None,
    dY: np.ndarray | None = None,
    dw: np.ndarray | None = None,
    with_scale: bool = True,
) -> SimilarityTransform:
    """Least-squares ``T`` minimizing ``sum w |Y - T(X)|^2 + sum dw |dY - sR dX|^2``.

    The second sum runs over difference vectors (edges), on which the
    translation cancels. Closed form after Umeyama: weighted centroids fix the
    translation, an SVD of the pooled cross-covariance the rotation.
    """
    w = np.asarray(w, dtype=float)
    W = w.sum()
    if W <= 0:
        raise InsufficientMatches("all correspondence weights are zero")
    mx = w @ X / W
    my = w @ Y / W
    Xc, Yc = X - mx, Y - my
    S = (Yc * w[:, None]).T @ Xc
    var = float(np.sum(w * np.sum(Xc * Xc, axis=1)))
    if dX is not None and len(dX):
        S = S + (dY * dw[:, None]).T @ dX
        var += float(np.sum(dw * np.sum(dX * dX, axis=1)))
    U, sig, Vt = np.linalg.svd(S)
    scale_ref = max(sig[0], 1e-300)
    if sig[1] <= 1e-12 * scale_ref:
        raise DegenerateConfiguration("matched points are collinear; rotation is not identifiable")
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    E = np.diag([1.0, 1.0, d])
    R = U @ E @ Vt
    s = float(np.sum(sig * np.diag(E)) / var) if with_scale else 1.0
    if not s > 0:
        raise DegenerateConfiguration("non-positive scale estimate")
    t = my - s * R @ mx
    return SimilarityTransform(s, R, t)


def _edge_pairs(C, P1, P2, A1, alpha3, rows):
    """Graph-1 edge vectors with their mapped graph-2 counterparts, both ends matched."""
    if alpha3 <= 0 or A1 is None:
        return None, None, None
    w = C.sum(axis=1)
    matched = np.zeros(len(P1), dtype=bool)
    matched[rows] = True
    i1, i2 = np.nonzero(np.triu(A1, 1))
    keep = matched[i1] & matched[i2]
    i1, i2 = i1[keep], i2[keep]
    if len(i1) == 0:
        return None, None, None
    M = np.zeros_like(P1)
    M[rows] = (C[rows] @ P2) / w[rows, None]
    return P1[i1] - P1[i2], M[i1] - M[i2], alpha3 * A1[i1, i2]


def j3_objective(T: SimilarityTransform, C, P1, P2, A1=None, alpha3: float = 0.0) -> float:
    """Residual in graph-1 coordinates after mapping graph-2 points with ``T``.

    ``T`` maps graph-2 coordinates onto graph 1 (the inverse of the
    graph-1 to graph-2 motion), matching the direction :func:`estimate` returns.
    """
    C = np.asarray(C, dtype=float)
    rows, w, mapped = _pairs_from_correspondence(C, P1, P2)
    r = P1[rows] - T.apply(mapped)
    val = float(np.sum(w * np.sum(r * r, axis=1)))
    dX, dY, dw = _edge_pairs(C, P1, P2, A1, alpha3, rows)
    if dX is not None:
        e = dX - T.s * dY @ T.R.T
        val += float(np.sum(dw * np.sum(e * e, axis=1)))
    return val


def estimate_from_points(C, P1, P2, A1=None, alpha3: float = 0.0, with_scale: bool = True) -> SimilarityTransform:
    """Transform taking graph-2 positions onto their matched graph-1 positions."""
    C = np.asarray(C, dtype=float)
    rows, w, mapped = _pairs_from_correspondence(C, P1, P2)
    if len(rows) < 3:
        raise InsufficientMatches(f"{len(rows)} matched pairs, need at least 3")
    dX, dY, dw = _edge_pairs(C, P1, P2, A1, alpha3, rows)
    return weighted_similarity(mapped, P1[rows], w, dY, dX, dw, with_scale)


def estimate(correspondence, g1, g2, cfg, rigid: bool = False) -> SimilarityTransform:
    """Closed-form minimizer of the matched-point plus matched-edge residual.

    Edge residuals are weighted by ``cfg.alpha3`` times graph 1's Euclidean
    adjacency. The result maps graph-2 coordinates onto graph 1; ``rigid``
    pins the scale to 1.
    """
    C = getattr(correspondence, "values", correspondence)
    return estimate_from_points(
        C,
        g1.positions,
        g2.positions,
        g1.adjacency_euclid,
        cfg.alpha3,
        with_scale=not rigid,
    )
