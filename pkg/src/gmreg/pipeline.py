"""Coarse-to-fine registration: keypoints, descriptors, graph matching, transform loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import matching as gm
from .cloud_io import PointCloud, mean_spacing, voxel_downsample
from .descriptor import DescriptorConfig, DescriptorSet, describe_keypoints
from .errors import ConfigError, DegenerateConfiguration, InsufficientMatches, NoValidDescriptors, TooFewKeypoints
from .graph import KeypointGraph, build_graph, node_dissimilarity
from .keypoints import ISSConfig, KeypointSet, detect_iss
from .matching import CorrespondenceMatrix, GmConfig
from .transform import SimilarityTransform, estimate_from_points, rotation_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    iss: ISSConfig = field(default_factory=ISSConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    gm: GmConfig = field(default_factory=GmConfig)
    k_nn: int = 8
    leaf: Optional[float] = None  # voxel downsampling before detection; None: off
    rigid: bool = True
    direction: str = "source_to_target"
    outer_max_iters: int = 10
    outer_tol: float = 1e-4  # degrees and meters
    consistency_tol: float = 1.0  # pair-distance tolerance, in mean point spacings
    residual_weight: float = 0.5  # share of the geometric residual in the refinement unary
    gate_floor: float = 0.5  # smallest residual gate in the refinement, in mean point spacings
    gate_factor: float = 2.0  # residual gate as a multiple of the median matched residual

    def __post_init__(self):
        if self.outer_max_iters < 1:
            raise ConfigError("outer_max_iters must be >= 1")
        if not self.outer_tol > 0:
            raise ConfigError("outer_tol must be positive")
        if self.direction not in ("source_to_target", "target_to_source"):
            raise ConfigError(f"unknown direction {self.direction!r}")


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: SimilarityTransform
    correspondence: CorrespondenceMatrix  # rows: target keypoints, columns: source keypoints
    iterations: int
    objective_trace: list
    converged: bool
    source_keypoints: KeypointSet | None = None
    target_keypoints: KeypointSet | None = None
    source_graph: KeypointGraph | None = None
    target_graph: KeypointGraph | None = None

    def matched_pairs(self) -> np.ndarray:
        """``(source point index, target point index)`` for every matched keypoint pair."""
        pairs = self.correspondence.pairs()
        t = self.target_keypoints.indices[self.target_graph.keypoint_index[pairs[:, 0]]]
        s = self.source_keypoints.indices[self.source_graph.keypoint_index[pairs[:, 1]]]
        return np.column_stack([s, t])


# ---------------------------------------------------------------- config file

_SECTIONS = {"iss": ISSConfig, "descriptor": DescriptorConfig, "gm": GmConfig}


def _config_keys() -> dict:
    keys = {}
    for sect, cls in _SECTIONS.items():
        for f in fields(cls):
            keys[f.name] = (sect, f)
    for f in fields(PipelineConfig):
        if f.name not in _SECTIONS:
            keys[f.name] = (None, f)
    return keys


def _coerce(raw: str, f, key: str):
    kind = str(f.type)
    if raw.lower() in ("none", "auto", ""):
        if "None" in kind or "Optional" in kind:
            return None
        raise ConfigError(f"{key} cannot be {raw!r}")
    try:
        if "bool" in kind:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if "float" in kind:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    keys = _config_keys()
    updates: dict = {s: {} for s in _SECTIONS}
    top: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in keys:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        sect, f = keys[key]
        val = _coerce(raw, f, key)
        (updates[sect] if sect else top)[key] = val
    base = base or PipelineConfig()
    try:
        parts = {s: replace(getattr(base, s), **updates[s]) for s in _SECTIONS}
        return replace(base, **parts, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str) -> PipelineConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for sect in _SECTIONS:
        for f in fields(getattr(cfg, sect)):
            lines.append(f"{f.name} = {getattr(getattr(cfg, sect), f.name)}")
    for f in fields(cfg):
        if f.name not in _SECTIONS:
            lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- stages


@dataclass(frozen=True, eq=False)
class Features:
    cloud: PointCloud
    keypoints: KeypointSet
    descriptors: DescriptorSet
    graph: KeypointGraph


def _prepare(cloud: PointCloud, iss: ISSConfig, desc: DescriptorConfig, k_nn: int, leaf) -> Features:
    if leaf:
        cloud = voxel_downsample(cloud, leaf)
    kps = detect_iss(cloud, iss)
    if len(kps) < 4:
        raise TooFewKeypoints(f"{cloud.frame_id or 'cloud'}: {len(kps)} keypoints, need at least 4")
    ds = describe_keypoints(cloud, kps, desc)
    if ds.valid.sum() < 4:
        raise NoValidDescriptors(f"{cloud.frame_id or 'cloud'}: {int(ds.valid.sum())} valid descriptors")
    return Features(cloud, kps, ds, build_graph(kps, ds, k_nn))


def resolve_detectors(source: PointCloud, cfg: PipelineConfig):
    """Fix data-dependent defaults once, from the source cloud, for both clouds."""
    ref = voxel_downsample(source, cfg.leaf) if cfg.leaf else source
    iss = cfg.iss.resolve(ref)
    desc = cfg.descriptor.resolve(iss.salient_radius)
    return iss, desc, mean_spacing(ref.points)


def _consistent_subset(pairs: np.ndarray, P1: np.ndarray, P2: np.ndarray, tol: float, rigid: bool) -> np.ndarray:
    """Largest (greedy) subset of candidate pairs that preserves all mutual distances.

    This is the candidate-restricted affinity: two assignments agree when the
    graph-1 distance between their rows matches the graph-2 distance between
    their columns. Pairs are dropped lowest-support first until every
    survivor agrees with all others.
    """
    if len(pairs) < 3:
        return pairs
    d1 = np.linalg.norm(P1[pairs[:, 0]][:, None] - P1[pairs[:, 0]][None], axis=-1)
    d2 = np.linalg.norm(P2[pairs[:, 1]][:, None] - P2[pairs[:, 1]][None], axis=-1)
    scale = 1.0
    if not rigid:
        off = ~np.eye(len(pairs), dtype=bool) & (d2 > tol)
        ratios = np.log(d1[off] / d2[off]) if off.any() else np.zeros(1)
        ratios = ratios[np.isfinite(ratios)]
        hist, edges = np.histogram(ratios, bins=200)
        k = int(np.argmax(hist))
        scale = float(np.exp(0.5 * (edges[k] + edges[k + 1])))
    dev = np.abs(d1 - scale * d2)
    agree = dev <= tol
    # a row or column used twice can never be part of one matching
    agree &= pairs[:, 0][:, None] != pairs[:, 0][None]
    agree &= pairs[:, 1][:, None] != pairs[:, 1][None]
    np.fill_diagonal(agree, True)
    # soft support favors pairs whose distances agree closely, not just within tol
    soft = np.where(agree, np.exp(-((dev / tol) ** 2)), 0.0)
    alive = np.ones(len(pairs), dtype=bool)
    while not agree[np.ix_(alive, alive)].all():
        idx = np.flatnonzero(alive)
        support = soft[np.ix_(alive, alive)].sum(axis=1)
        # lowest support goes first; ties drop the later candidate
        worst = idx[np.lexsort((-idx, support))[0]]
        alive[worst] = False
    return pairs[alive]


def _pairs_to_matrix(pairs: np.ndarray, shape) -> CorrespondenceMatrix:
    S = np.zeros(shape)
    if len(pairs):
        S[pairs[:, 0], pairs[:, 1]] = 1.0
    return CorrespondenceMatrix(S, "discrete")


def initial_correspondence(C_rel, g1: KeypointGraph, g2: KeypointGraph, D, tol: float, rigid: bool) -> CorrespondenceMatrix:
    """Round the relaxed J1 solution, pool it with the unary-only assignment and keep the consistent core."""
    cand = np.vstack([gm.discretize(C_rel).pairs(), gm.discretize(-D).pairs()])
    cand = np.unique(cand, axis=0)
    core = _consistent_subset(cand, g1.positions, g2.positions, tol, rigid)
    return _pairs_to_matrix(core, D.shape)


def coarse_match(g1: KeypointGraph, g2: KeypointGraph, cfg: PipelineConfig, spacing: float):
    """Frank-Wolfe on J1 followed by consistent rounding; returns ``(D, resolved GmConfig, C)``."""
    D = node_dissimilarity(g1, g2)
    gm_cfg = cfg.gm.resolve(D)
    # edge terms per squared median edge length, so the weights are unitless
    sf = float(np.median(g1.edge_len_feat)) or 1.0
    se = float(np.median(g1.edge_len_euclid)) or 1.0
    j1_cfg = replace(gm_cfg, alpha1=gm_cfg.alpha1 / sf**2, alpha2=gm_cfg.alpha2 / se**2)
    C_rel = gm.frank_wolfe(g1, g2, D, j1_cfg)
    C = initial_correspondence(C_rel, g1, g2, D, cfg.consistency_tol * spacing, cfg.rigid)
    return D, gm_cfg, C


def _motion_delta(A: SimilarityTransform, B: SimilarityTransform):
    return np.degrees(rotation_angle(A.R.T @ B.R)), float(np.linalg.norm(A.t - B.t))


def register(source: PointCloud, target: PointCloud, cfg: PipelineConfig | None = None) -> RegistrationResult:
    """Estimate the transform taking ``source`` onto ``target``.

    Internally graph 1 is built on the target and graph 2 on the source, so
    the estimated map (graph 2 onto graph 1) already points source to target.
    """
    cfg = cfg or PipelineConfig()
    iss, desc, spacing = resolve_detectors(source, cfg)
    fs = _prepare(source, iss, desc, cfg.k_nn, cfg.leaf)
    ft = _prepare(target, iss, desc, cfg.k_nn, cfg.leaf)
    g1, g2 = ft.graph, fs.graph
    D, gm_cfg, C = coarse_match(g1, g2, cfg, spacing)
    with_scale = not cfg.rigid
    try:
        T = estimate_from_points(C.values, g1.positions, g2.positions, g1.adjacency_euclid, gm_cfg.alpha3, with_scale)
    except InsufficientMatches as exc:
        raise DegenerateConfiguration(f"initial matching too small: {exc}") from None

    trace: list = []
    converged = False
    iterations = 0
    for it in range(cfg.outer_max_iters):
        iterations = it + 1
        C_new, obj = _refine_step(C, T, g1, g2, D, gm_cfg, cfg, spacing)
        if trace and obj > trace[-1] + 1e-9:
            # an ascent step is not accepted; the incumbent stands
            log.debug("outer iteration %d rejected: %.6g > %.6g", it, obj, trace[-1])
            break
        try:
            T_new = estimate_from_points(
                C_new.values, g1.positions, g2.positions, g1.adjacency_euclid, gm_cfg.alpha3, with_scale
            )
        except (InsufficientMatches, DegenerateConfiguration):
            log.debug("outer iteration %d left too few matches; keeping previous estimate", it)
            break
        trace.append(obj)
        dr, dt = _motion_delta(T, T_new)
        C, T = C_new, T_new
        if dr < cfg.outer_tol and dt < cfg.outer_tol:
            converged = True
            break

    if cfg.direction == "target_to_source":
        T = T.inverse()
    return RegistrationResult(T, C, iterations, trace, converged, fs.keypoints, ft.keypoints, g2, g1)


def refinement_unary(D, g1: KeypointGraph, g2: KeypointGraph, T: SimilarityTransform, gate: float, weight: float):
    """Blend of feature dissimilarity and the squared residual under ``T`` (gated at ``gate``)."""
    r = np.linalg.norm(g1.positions[:, None] - T.apply(g2.positions)[None], axis=-1)
    geo = np.minimum(r / gate, 1.0) ** 2
    return (1.0 - weight) * D + weight * geo, r


def _refine_step(C, T, g1, g2, D, gm_cfg, cfg, spacing):
    """One outer iteration: J2 refinement around the incumbent, then gated rounding."""
    pairs = C.pairs()
    r_now = np.linalg.norm(g1.positions[pairs[:, 0]] - T.apply(g2.positions[pairs[:, 1]]), axis=1)
    gate = max(cfg.gate_factor * float(np.median(r_now)), cfg.gate_floor * spacing)
    U, r = refinement_unary(D, g1, g2, T, gate, cfg.residual_weight)
    # matching pays off below the unary value of a pair sitting at the gate
    u = 0.5 * ((1.0 - cfg.residual_weight) * float(np.percentile(D, 75)) + cfg.residual_weight)
    j2_cfg = replace(gm_cfg, unmatched_cost=u)
    inv = T.inverse()
    C_rel = gm.refine_j2(C, g1, g2, U, inv.apply, j2_cfg, incumbent=C)
    C_new = gm.discretize(C_rel, np.where(r <= gate, U, np.inf), 2.0 * u)
    L = gm.laplacian(gm.transformed_adjacency(g1, g2, inv.apply))
    obj = gm.objective_j2(C_new, g2, U, C, L, j2_cfg)
    return C_new, obj
