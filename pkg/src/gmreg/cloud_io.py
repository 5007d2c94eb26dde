"""Point cloud container, ASCII PLY / XYZ reading and writing, preconditioning."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateNeighborhood, EmptyCloud, MalformedFile, NonFiniteCoordinate

log = logging.getLogger(__name__)

_UNIT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions in meters with optional unit normals.

    Rows of ``normals`` may be all-NaN, which marks a point whose normal could
    not be estimated.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    frame_id: str = ""

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise NonFiniteCoordinate(f"cloud {self.frame_id!r} has non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.ascontiguousarray(self.normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError(f"{len(nrm)} normals for {len(pts)} points")
            defined = ~np.all(np.isnan(nrm), axis=1)
            norms = np.linalg.norm(nrm[defined], axis=1)
            if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def transformed(self, s: float, R: np.ndarray, t: np.ndarray) -> "PointCloud":
        pts = s * self.points @ np.asarray(R).T + np.asarray(t)
        nrm = None if self.normals is None else self.normals @ np.asarray(R).T
        return PointCloud(pts, nrm, self.frame_id)

    def subset(self, idx) -> "PointCloud":
        nrm = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], nrm, self.frame_id)


def mean_spacing(points: np.ndarray) -> float:
    """Mean distance from each point to its nearest neighbor."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.mean(d[:, 1]))


# ---------------------------------------------------------------- reading


def _detect_format(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ply":
        return "ply-ascii"
    if ext in (".xyz", ".txt", ".pts"):
        return "xyz"
    raise MalformedFile(f"cannot infer format of {path!r}; pass format explicitly")


def _parse_rows(lines, ncols: Optional[int], where: str) -> np.ndarray:
    rows = []
    for lineno, line in lines:
        parts = line.split()
        if ncols is not None and len(parts) < ncols:
            raise MalformedFile(f"{where}:{lineno}: expected {ncols} fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise MalformedFile(f"{where}:{lineno}: {exc}") from None
    return rows


def _read_xyz(path: str) -> PointCloud:
    body = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            body.append((lineno, s))
    rows = _parse_rows(body, None, path)
    widths = {len(r) for r in rows}
    if not rows:
        raise EmptyCloud(f"{path}: no points")
    if len(widths) != 1 or widths.pop() not in (3, 6):
        raise MalformedFile(f"{path}: every line must carry 3 or 6 fields")
    arr = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteCoordinate(f"{path}: non-finite value")
    normals = arr[:, 3:6] if arr.shape[1] == 6 else None
    return PointCloud(arr[:, :3], normals, os.path.basename(path))


def _read_ply(path: str) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MalformedFile(f"{path}: missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    elements: list[tuple[str, int]] = []
    current = None
    end = None
    fmt_ok = False
    for i, raw in enumerate(lines[1:], 1):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:] != ["ascii", "1.0"]:
                raise MalformedFile(f"{path}: only 'format ascii 1.0' is supported")
            fmt_ok = True
        elif tok[0] == "element":
            if len(tok) != 3:
                raise MalformedFile(f"{path}:{i + 1}: bad element line")
            current = tok[1]
            elements.append((tok[1], int(tok[2])))
            if current == "vertex":
                n_vertex = int(tok[2])
        elif tok[0] == "property":
            if current == "vertex":
                if tok[1] == "list":
                    raise MalformedFile(f"{path}: list properties on vertex are not supported")
                props.append(tok[-1])
        elif tok[0] == "end_header":
            end = i
            break
        else:
            raise MalformedFile(f"{path}:{i + 1}: unexpected header line {raw!r}")
    if end is None or not fmt_ok or n_vertex is None:
        raise MalformedFile(f"{path}: incomplete header")
    if elements[0][0] != "vertex":
        raise MalformedFile(f"{path}: vertex must be the first element")
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise MalformedFile(f"{path}: vertex lacks property {axis}")
    body = [(j + 1, lines[j]) for j in range(end + 1, len(lines)) if lines[j].strip()]
    if len(body) < n_vertex:
        raise MalformedFile(f"{path}: header declares {n_vertex} vertices, body has {len(body)}")
    if len(body) > n_vertex and len(elements) == 1:
        raise MalformedFile(f"{path}: header declares {n_vertex} vertices, body has {len(body)}")
    rows = _parse_rows(body[:n_vertex], len(props), path)
    if n_vertex == 0:
        raise EmptyCloud(f"{path}: no points")
    arr = np.asarray(rows, dtype=float)[:, : len(props)]
    if not np.all(np.isfinite(arr)):
        raise NonFiniteCoordinate(f"{path}: non-finite value")
    col = {p: k for k, p in enumerate(props)}
    pts = arr[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if all(p in col for p in ("nx", "ny", "nz")):
        normals = arr[:, [col["nx"], col["ny"], col["nz"]]]
    return PointCloud(pts, normals, os.path.basename(path))


def load_cloud(path: str, format: Optional[str] = None) -> PointCloud:
    """Read an ASCII PLY or whitespace XYZ file, keeping file order."""
    fmt = format or _detect_format(path)
    if fmt == "xyz":
        return _read_xyz(path)
    if fmt == "ply-ascii":
        return _read_ply(path)
    raise MalformedFile(f"unsupported format {fmt!r}")


# ---------------------------------------------------------------- writing


def _fmt_rows(arr: np.ndarray) -> list[str]:
    return [" ".join(f"{v:.9f}" for v in row) for row in arr]


def write_cloud(cloud: PointCloud, path: str, format: Optional[str] = None) -> None:
    fmt = format or _detect_format(path)
    data = cloud.points
    if cloud.normals is not None and not np.any(np.isnan(cloud.normals)):
        data = np.hstack([cloud.points, cloud.normals])
    # "-0.000000000" would break byte-identical output between runs
    data = np.where(data == 0.0, 0.0, data)
    rows = _fmt_rows(data)
    with open(path, "w", newline="\n") as fh:
        if fmt == "ply-ascii":
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(data)}\n")
            names = ["x", "y", "z", "nx", "ny", "nz"][: data.shape[1]]
            for name in names:
                fh.write(f"property double {name}\n")
            fh.write("end_header\n")
        elif fmt != "xyz":
            raise MalformedFile(f"unsupported format {fmt!r}")
        fh.write("\n".join(rows))
        fh.write("\n")


# ---------------------------------------------------------------- preconditioning


def _orient_outward(normals: np.ndarray, points: np.ndarray) -> np.ndarray:
    away = points - points.mean(axis=0)
    dots = np.einsum("ij,ij->i", normals, away)
    scale = np.linalg.norm(away, axis=1)
    flip = dots < -1e-9 * np.maximum(scale, 1.0)
    # points in the centroid's plane fall back to a positive dominant component
    tie = np.abs(dots) <= 1e-9 * np.maximum(scale, 1.0)
    if np.any(tie):
        dom = np.argmax(np.abs(normals[tie]), axis=1)
        flip[tie] = normals[tie][np.arange(len(dom)), dom] < 0
    out = normals.copy()
    out[flip] *= -1.0
    return out


def estimate_normals(cloud: PointCloud, k: int = 10) -> PointCloud:
    """PCA normals from the ``k`` nearest neighbors of every point.

    Points whose neighborhood covariance has rank < 2 get a NaN normal; if that
    happens for every point, :class:`DegenerateNeighborhood` is raised.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    pts = cloud.points
    if len(pts) < k + 1:
        raise ValueError(f"need at least {k + 1} points, got {len(pts)}")
    _, idx = cKDTree(pts).query(pts, k=k + 1)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    extent = np.maximum(w[:, 2], 1e-300)
    degenerate = w[:, 1] <= 1e-10 * extent
    normals = _orient_outward(normals, pts)
    normals[degenerate] = np.nan
    if np.all(degenerate):
        raise DegenerateNeighborhood("covariance rank < 2 at every point")
    if np.any(degenerate):
        log.warning("%d points have degenerate neighborhoods and no normal", int(degenerate.sum()))
    return PointCloud(pts, normals, cloud.frame_id)


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """Replace the points of every occupied ``leaf``-sized voxel by their centroid."""
    if not leaf > 0:
        raise ValueError("leaf must be positive")
    keys = np.floor(cloud.points / leaf).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    normals = None
    if cloud.normals is not None:
        acc = np.zeros_like(sums)
        np.add.at(acc, inverse, np.nan_to_num(cloud.normals))
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            normals = np.where(norm > 1e-12, acc / norm, np.nan)
    return PointCloud(centroids, normals, cloud.frame_id)
