"""Command-line interface: ``gmreg <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .cloud_io import load_cloud, write_cloud
from .errors import ConfigError, RegistrationError

EXIT_OK, EXIT_USAGE, EXIT_PIPELINE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raise instead of exiting so usage problems map to exit code 1."""

    def error(self, message):
        raise UsageError(message)


def _float_list(text: str) -> list:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _seed(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("seed must be non-negative")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmreg", description="Keypoint graph-matching point cloud registration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, out_required=False):
        sp.add_argument("--config", metavar="PATH", help="key=value pipeline configuration")
        sp.add_argument("--out", metavar="PATH", required=out_required)
        sp.add_argument("--rigid", type=_bool, metavar="BOOL", help="pin scale to 1 (default true)")

    r = sub.add_parser("register", help="estimate the transform taking source onto target")
    r.add_argument("source")
    r.add_argument("target")
    common(r)
    r.add_argument("--gt", metavar="PATH", help="ground-truth 4x4 transform for error reporting")

    d = sub.add_parser("detect", help="ISS keypoints of one cloud")
    d.add_argument("cloud")
    common(d)

    ds = sub.add_parser("describe", help="keypoints plus rotation-invariant descriptors")
    ds.add_argument("cloud")
    common(ds)

    m = sub.add_parser("match", help="graph matching between two clouds, no transform loop")
    m.add_argument("source")
    m.add_argument("target")
    common(m)

    s = sub.add_parser("synth", help="write a synthetic scene with ground truth")
    s.add_argument("--kind", default="cube-room")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--points", type=int, default=2000)
    s.add_argument("--overlap", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.0, help="per-axis sensor noise sigma in meters")
    s.add_argument("--out", metavar="DIR", required=True)

    w = sub.add_parser("sweep", help="noise sensitivity sweep to CSV")
    w.add_argument("--kind", default="cube-room")
    w.add_argument("--seed", type=_seed, default=0, help="first scene seed")
    w.add_argument("--repeats", type=int, default=5, help="scenes per cell (seeds seed..seed+repeats-1)")
    w.add_argument("--ratios", type=_float_list, default=[0.1, 0.2, 0.3])
    w.add_argument("--levels", type=_float_list, default=[0.1, 0.2, 0.3])
    w.add_argument("--points", type=int, default=2000)
    common(w, out_required=True)
    return p


def _config(args):
    from dataclasses import replace

    from .pipeline import PipelineConfig, load_config

    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "rigid", None) is not None:
        cfg = replace(cfg, rigid=args.rigid)
    return cfg


def _fmt_matrix(M) -> str:
    M = np.where(M == 0.0, 0.0, M)
    return "\n".join(" ".join(f"{v:.15f}" for v in row) for row in M)


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_register(args) -> int:
    from .pipeline import register
    from .transform import read_transform, registration_errors, write_transform

    cfg = _config(args)
    gt = read_transform(args.gt) if args.gt else None
    res = register(load_cloud(args.source), load_cloud(args.target), cfg)
    if args.out:
        write_transform(res.transform, args.out)
    print(_fmt_matrix(res.transform.matrix()))
    print(f"iterations={res.iterations} converged={str(res.converged).lower()} matches={len(res.correspondence.pairs())}")
    if gt is not None:
        err = registration_errors(res.transform, gt)
        print(f"rot_err={err.rotation_error:.6f} trans_err={err.translation_error:.6f}")
    return EXIT_OK


def _keypoints(path, cfg):
    from .keypoints import detect_iss

    cloud = load_cloud(path)
    iss = cfg.iss.resolve(cloud)
    return cloud, iss, detect_iss(cloud, iss)


def cmd_detect(args) -> int:
    cfg = _config(args)
    _, _, kps = _keypoints(args.cloud, cfg)
    lines = ["# index x y z saliency"]
    for i, p, s in zip(kps.indices, kps.positions, kps.saliency):
        lines.append(f"{i} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} {s:.9e}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_describe(args) -> int:
    from .descriptor import describe_keypoints

    cfg = _config(args)
    cloud, iss, kps = _keypoints(args.cloud, cfg)
    desc = describe_keypoints(cloud, kps, cfg.descriptor.resolve(iss.salient_radius))
    lines = ["# index valid features..."]
    for i, ok, f in zip(kps.indices, desc.valid, desc.features):
        lines.append(f"{i} {int(ok)} " + " ".join(f"{v:.9f}" for v in f))
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_match(args) -> int:
    from .pipeline import _prepare, coarse_match, resolve_detectors

    cfg = _config(args)
    source, target = load_cloud(args.source), load_cloud(args.target)
    iss, desc, spacing = resolve_detectors(source, cfg)
    fs = _prepare(source, iss, desc, cfg.k_nn, cfg.leaf)
    ft = _prepare(target, iss, desc, cfg.k_nn, cfg.leaf)
    g1, g2 = ft.graph, fs.graph
    D, _, C = coarse_match(g1, g2, cfg, spacing)
    lines = ["# source_index target_index dissimilarity"]
    for r, c in C.pairs():
        s_idx = fs.keypoints.indices[g2.keypoint_index[c]]
        t_idx = ft.keypoints.indices[g1.keypoint_index[r]]
        lines.append(f"{s_idx} {t_idx} {D[r, c]:.9f}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .evalkit import NoiseSpec, add_noise, generate_scene
    from .transform import write_transform

    sc = generate_scene(args.kind, args.points, overlap=args.overlap, seed=args.seed)
    src, tgt = sc.source, sc.target
    if args.noise > 0:
        src = add_noise(src, NoiseSpec(1.0, args.noise, 2 * args.seed + 1))
        tgt = add_noise(tgt, NoiseSpec(1.0, args.noise, 2 * args.seed + 2))
    os.makedirs(args.out, exist_ok=True)
    write_cloud(src, os.path.join(args.out, "source.ply"))
    write_cloud(tgt, os.path.join(args.out, "target.ply"))
    write_transform(sc.ground_truth, os.path.join(args.out, "gt.txt"))
    np.savetxt(os.path.join(args.out, "correspondence.txt"), sc.true_correspondence, fmt="%d")
    print(f"wrote {args.kind} scene (seed {args.seed}) to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .evalkit import run_sweep, write_sweep_csv

    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    cfg = _config(args)
    seeds = range(args.seed, args.seed + args.repeats)
    rows = run_sweep(args.kind, seeds, args.ratios, args.levels, cfg, args.points)
    write_sweep_csv(rows, args.out)
    failed = sum(1 for r in rows if r.failed)
    print(f"wrote {len(rows)} rows to {args.out} ({failed} failed)")
    return EXIT_OK


COMMANDS = {
    "register": cmd_register,
    "detect": cmd_detect,
    "describe": cmd_describe,
    "match": cmd_match,
    "synth": cmd_synth,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"usage error: ConfigError: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RegistrationError as exc:
        print(f"{type(exc).__name__} ({exc.stage}): {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (OSError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
