"""Synthetic scenes with ground truth, noise injection and sensitivity sweeps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .cloud_io import PointCloud
from .errors import RegistrationError
from .transform import SimilarityTransform, random_rotation, registration_errors

log = logging.getLogger(__name__)

SCENE_KINDS = ("cube-room", "facade", "terrain")
CSV_COLUMNS = ("kind", "seed", "ratio", "level", "rot_err_deg", "trans_err_m", "iterations", "converged")

# noise levels in a sweep are quoted for scenes of this size and rescaled to
# the actual scene, see scaled_level()
REFERENCE_EXTENT = 50.0


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    source: PointCloud
    target: PointCloud
    ground_truth: SimilarityTransform  # maps source coordinates onto target
    true_correspondence: np.ndarray  # (K, 2) pairs of (source index, target index)
    overlap_fraction: float
    kind: str = ""

    @property
    def extent(self) -> float:
        p = self.source.points
        return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))


@dataclass(frozen=True)
class NoiseSpec:
    ratio: float = 0.0
    level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("noise ratio must lie in [0, 1]")
        if self.level < 0:
            raise ValueError("noise level must be nonnegative")


# ---------------------------------------------------------------- surfaces


def _box_faces(lo, hi, skip=()):
    """Axis-aligned box faces as (origin, u, v) rectangles."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    size = hi - lo
    faces = []
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        for side, val in (("lo", lo[axis]), ("hi", hi[axis])):
            if (axis, side) in skip:
                continue
            o = lo.copy()
            o[axis] = val
            u = np.zeros(3)
            u[a] = size[a]
            v = np.zeros(3)
            v[b] = size[b]
            faces.append((o, u, v))
    return faces


def _sample_rects(rects, n: int, rng: np.random.Generator) -> np.ndarray:
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in rects])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = []
    for (o, u, v), k in zip(rects, counts):
        ab = rng.random((k, 2))
        pts.append(o + ab[:, :1] * u + ab[:, 1:] * v)
    return np.vstack(pts)


def _cube_room(n: int, rng: np.random.Generator) -> np.ndarray:
    W, Dp, H = 4.0, 3.0, 2.5
    rects = _box_faces((0, 0, 0), (W, Dp, H))
    # furniture of distinct sizes at irregular spots so the room has no symmetry
    boxes = []
    for _ in range(4):
        size = rng.uniform([0.4, 0.4, 0.3], [1.3, 1.0, 1.4])
        x = rng.uniform(0.1, W - size[0] - 0.1)
        y = rng.uniform(0.1, Dp - size[1] - 0.1)
        boxes.append(((x, y, 0.0), (x + size[0], y + size[1], size[2])))
    for lo, hi in boxes:
        rects += _box_faces(lo, hi, skip=((2, "lo"),))
    # a wall-mounted shelf
    z = rng.uniform(1.2, 1.8)
    rects += _box_faces((1.0, Dp - 0.35, z), (2.6, Dp, z + 0.08), skip=((1, "hi"),))
    return _sample_rects(rects, n, rng)


def _facade(n: int, rng: np.random.Generator) -> np.ndarray:
    W, H = 10.0, 7.0
    rects = []
    # main wall with recessed windows: sample the wall, drop window openings,
    # add the window reveals and recessed panes
    n_wall = int(0.6 * n)
    windows = []
    for row in range(2):
        for col in range(4):
            if rng.random() < 0.15:
                continue
            w = rng.uniform(0.9, 1.4)
            h = rng.uniform(1.1, 1.6)
            x = 0.6 + col * 2.4 + rng.uniform(0.0, 0.6)
            zc = 1.0 + row * 3.0 + rng.uniform(0.0, 0.6)
            depth = rng.uniform(0.2, 0.35)
            windows.append((x, zc, w, h, depth))
    wall = np.column_stack([rng.uniform(0, W, 3 * n_wall), np.zeros(3 * n_wall), rng.uniform(0, H, 3 * n_wall)])
    keep = np.ones(len(wall), dtype=bool)
    for x, zc, w, h, depth in windows:
        keep &= ~((wall[:, 0] > x) & (wall[:, 0] < x + w) & (wall[:, 2] > zc) & (wall[:, 2] < zc + h))
    wall = wall[keep][:n_wall]
    for x, zc, w, h, depth in windows:
        rects.append((np.array([x, depth, zc]), np.array([w, 0, 0]), np.array([0, 0, h])))
        rects.append((np.array([x, 0, zc]), np.array([w, 0, 0]), np.array([0, depth, 0])))
        rects.append((np.array([x, 0, zc + h]), np.array([w, 0, 0]), np.array([0, depth, 0])))
        rects.append((np.array([x, 0, zc]), np.array([0, depth, 0]), np.array([0, 0, h])))
        rects.append((np.array([x + w, 0, zc]), np.array([0, depth, 0]), np.array([0, 0, h])))
    # balcony slab and ground
    bx = rng.uniform(1.0, 5.0)
    rects += _box_faces((bx, -1.2, 3.6), (bx + 3.0, 0.0, 3.75), skip=((1, "hi"),))
    rects.append((np.array([0.0, -4.0, 0.0]), np.array([W, 0, 0]), np.array([0, 4.0, 0])))
    rest = _sample_rects(rects, n - len(wall), rng)
    return np.vstack([wall, rest])


def _terrain(n: int, rng: np.random.Generator) -> np.ndarray:
    S = 12.0
    xy = rng.uniform(0, S, (n, 2))
    z = np.zeros(n)
    for _ in range(9):
        c = rng.uniform(0, S, 2)
        amp = rng.uniform(-1.5, 2.0)
        width = rng.uniform(1.0, 3.0)
        z += amp * np.exp(-np.sum((xy - c) ** 2, axis=1) / (2 * width**2))
    return np.column_stack([xy, z])


_GENERATORS = {"cube-room": _cube_room, "facade": _facade, "terrain": _terrain}


def random_motion(rng: np.random.Generator, diameter: float, max_angle_deg: float = 180.0) -> SimilarityTransform:
    """Rigid motion: uniform axis, angle up to ``max_angle_deg``, translation within ``diameter``."""
    R = random_rotation(rng, max_angle_deg)
    d = rng.normal(size=3)
    t = d / np.linalg.norm(d) * diameter * rng.random() ** (1.0 / 3.0)
    return SimilarityTransform(1.0, R, t)


def generate_scene(
    kind: str = "cube-room",
    n_points: int = 2000,
    motion: SimilarityTransform | None = None,
    overlap: float = 1.0,
    seed: int = 0,
) -> SyntheticScene:
    """Source scene plus a moved (and optionally cropped) copy as target.

    ``motion=None`` draws a random rigid motion. The target keeps a fraction
    ``overlap`` of the source points, cut by a random vertical half-space, and
    lists them in shuffled order.
    """
    if kind not in _GENERATORS:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    if n_points < 500:
        raise ValueError("n_points must be >= 500")
    if not 0.0 < overlap <= 1.0:
        raise ValueError("overlap must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    pts = _GENERATORS[kind](n_points, rng)
    pts = pts - pts.mean(axis=0)
    source = PointCloud(pts, frame_id=f"{kind}-source")
    diameter = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    if motion is None:
        motion = random_motion(rng, diameter)
    keep = np.arange(n_points)
    if overlap < 1.0:
        ang = rng.uniform(0, 2 * np.pi)
        proj = pts[:, 0] * np.cos(ang) + pts[:, 1] * np.sin(ang)
        keep = np.sort(np.argsort(proj, kind="stable")[: int(round(overlap * n_points))])
    order = rng.permutation(len(keep))
    src_idx = keep[order]
    target = PointCloud(motion.apply(pts[src_idx]), frame_id=f"{kind}-target")
    corr = np.column_stack([src_idx, np.arange(len(src_idx))])
    corr = corr[np.argsort(corr[:, 0], kind="stable")]
    return SyntheticScene(source, target, motion, corr, len(keep) / n_points, kind)


def add_noise(cloud: PointCloud, spec: NoiseSpec) -> PointCloud:
    """Displace exactly ``round(ratio * N)`` seed-chosen points by N(0, level^2) per axis."""
    rng = np.random.default_rng(spec.seed)
    N = len(cloud)
    k = int(round(spec.ratio * N))
    chosen = np.sort(rng.choice(N, size=k, replace=False))
    offsets = rng.normal(size=(k, 3)) * spec.level
    pts = cloud.points.copy()
    pts[chosen] += offsets
    return PointCloud(pts, None, cloud.frame_id)


def scaled_level(level: float, scene: SyntheticScene, reference_extent: float = REFERENCE_EXTENT) -> float:
    """Noise sigma for ``scene`` equivalent to ``level`` meters on a scene of ``reference_extent``."""
    return level * scene.extent / reference_extent


# ---------------------------------------------------------------- sweeps

# sensor noise every sweep scene carries before the swept perturbation, so
# that the clean cell measures a realistic baseline instead of an exact copy
BASELINE_NOISE = 0.01


@dataclass(frozen=True)
class SweepRow:
    kind: str
    seed: int
    ratio: float
    level: float
    rot_err_deg: float = float("nan")
    trans_err_m: float = float("nan")
    iterations: int = 0
    converged: bool = False
    failed: str = ""  # error name when the cell raised

    def as_csv(self) -> list:
        conv = "failed" if self.failed else str(self.converged).lower()
        return [
            self.kind,
            str(self.seed),
            f"{self.ratio:.6f}",
            f"{self.level:.6f}",
            f"{self.rot_err_deg:.9f}",
            f"{self.trans_err_m:.9f}",
            str(self.iterations),
            conv,
        ]


def baseline_scene(kind: str, seed: int, n_points: int = 2000, baseline: float = BASELINE_NOISE) -> SyntheticScene:
    """Synthetic scene with independent sensor noise on both clouds."""
    sc = generate_scene(kind, n_points, seed=seed)
    src = add_noise(sc.source, NoiseSpec(1.0, baseline, 2 * seed + 1_000_003))
    tgt = add_noise(sc.target, NoiseSpec(1.0, baseline, 2 * seed + 1_000_004))
    return replace(sc, source=src, target=tgt)


def sensitivity_sweep(
    scene: SyntheticScene,
    ratios: Sequence[float],
    levels: Sequence[float],
    cfg=None,
    seed: int = 0,
    reference_extent: float | None = REFERENCE_EXTENT,
) -> list:
    """Register ``scene`` once per (ratio, level) cell against a freshly noised target.

    Levels are nominal meters on a ``reference_extent`` scene and rescaled to
    this one (``None`` uses them as given). Every cell draws its noise from
    the same ``seed``, so cells differ only in ratio and level. A cell whose
    registration raises is recorded as failed and the sweep moves on.
    """
    from .pipeline import register

    rows = []
    for ratio in ratios:
        for level in levels:
            sigma = level if reference_extent is None else scaled_level(level, scene, reference_extent)
            target = add_noise(scene.target, NoiseSpec(ratio, sigma, seed))
            try:
                res = register(scene.source, target, cfg)
            except RegistrationError as exc:
                log.warning("cell ratio=%g level=%g seed=%d failed: %s", ratio, level, seed, exc)
                rows.append(SweepRow(scene.kind, seed, ratio, level, failed=type(exc).__name__))
                continue
            err = registration_errors(res.transform, scene.ground_truth)
            rows.append(
                SweepRow(
                    scene.kind,
                    seed,
                    float(ratio),
                    float(level),
                    err.rotation_error,
                    err.translation_error,
                    res.iterations,
                    res.converged,
                )
            )
    return rows


def run_sweep(
    kind: str,
    seeds: Iterable[int],
    ratios: Sequence[float],
    levels: Sequence[float],
    cfg=None,
    n_points: int = 2000,
) -> list:
    """One baseline scene per seed, swept over the grid; rows ordered by (ratio, level, seed)."""
    rows = []
    for seed in seeds:
        rows += sensitivity_sweep(baseline_scene(kind, seed, n_points), ratios, levels, cfg, seed)
    return sorted(rows, key=lambda r: (r.ratio, r.level, r.seed))


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.as_csv())
    return buf.getvalue()


def write_sweep_csv(rows: Iterable[SweepRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(sweep_csv(rows))


def cell_means(rows: Iterable[SweepRow]) -> dict:
    """``(ratio, level) -> (mean rotation error, mean translation error, failures)``."""
    acc: dict = {}
    for r in rows:
        acc.setdefault((r.ratio, r.level), []).append(r)
    out = {}
    for key, rs in acc.items():
        ok = [r for r in rs if not r.failed]
        rot = float(np.mean([r.rot_err_deg for r in ok])) if ok else float("nan")
        tr = float(np.mean([r.trans_err_m for r in ok])) if ok else float("nan")
        out[key] = (rot, tr, len(rs) - len(ok))
    return out
