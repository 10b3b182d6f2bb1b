"""Command line front end.

One executable, six subcommands:

    prepare   mesh file -> normalized oriented point cloud (PLY)
    fit       train the composed model on a cloud
    mesh      extract an iso-surface from a trained bundle
    eval      compare two surfaces, JSON metrics on stdout
    transfer  run the four-stage detail transfer pipeline
    verify    numerically check the displacement distance bounds

Exit codes: 0 success; 2 for anything wrong with the inputs (unreadable
files, bad config keys, validation failures); 3 for numeric failures
(diverged training, non-finite field values, inapplicable bounds).
Every training run echoes its fully resolved configuration into
run_manifest.json next to its outputs, so a run can be reproduced from
its output directory alone.
"""

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import __version__
from .config import RunConfig
from .errors import (ConfigError, DegenerateGeometryError,
                     InapplicableBoundError, ParseError, ShapeError,
                     TrainingDivergence, UnsupportedFormatError,
                     ValidationError)
from .fields import BUILTIN_FIELDS, builtin_field
from .geometry import (load_cloud, load_mesh, normalize_mesh, sample_surface,
                       save_cloud, save_mesh)
from .meshing import marching_cubes, sample_grid
from .metrics import chamfer_metrics
from .model import DisplacementModel
from .precision import set_precision
from .theory import verify_bounds
from .training import fit
from .transfer import transfer_pipeline

OK, USAGE_ERROR, NUMERIC_ERROR = 0, 2, 3

_USAGE_FAILURES = (ConfigError, ParseError, ValidationError, ShapeError,
                   UnsupportedFormatError, DegenerateGeometryError, OSError)
_NUMERIC_FAILURES = (TrainingDivergence, InapplicableBoundError,
                     FloatingPointError)


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed; keep its code
        return int(exc.code or 0)
    try:
        return args.run(args)
    except _NUMERIC_FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except _USAGE_FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="dispfield",
        description="base-plus-displacement implicit surface toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="sample a mesh into an oriented cloud")
    p.add_argument("--mesh", required=True, help="input OBJ or PLY mesh")
    p.add_argument("--out", required=True, help="output cloud PLY")
    p.add_argument("--count", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--margin", type=float, default=0.9,
                   help="normalized shape half-width inside the unit cube")
    p.set_defaults(run=cmd_prepare)

    p = sub.add_parser("fit", help="train the composed model")
    _config_args(p)
    p.add_argument("--cloud", help="training cloud PLY (overrides config)")
    p.add_argument("--out-dir", help="output directory (overrides config)")
    p.add_argument("--no-bounded-head", action="store_true",
                   help="ablation: unbounded displacement head")
    p.add_argument("--no-attenuation", action="store_true",
                   help="ablation: no displacement fade with base distance")
    p.add_argument("--no-progressive", action="store_true",
                   help="ablation: train the composition from step one")
    p.set_defaults(run=cmd_fit)

    p = sub.add_parser("mesh", help="extract an iso-surface mesh")
    p.add_argument("--bundle", required=True, help="trained model bundle dir")
    p.add_argument("--out", required=True, help="output OBJ or PLY mesh")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--bounds", type=float, default=1.0)
    p.add_argument("--base-only", action="store_true",
                   help="mesh the smooth base instead of the composition")
    p.set_defaults(run=cmd_mesh)

    p = sub.add_parser("eval", help="compare two surfaces")
    p.add_argument("surface_a", help="mesh or cloud file")
    p.add_argument("surface_b", help="mesh or cloud file")
    p.add_argument("--samples", type=int, default=100000,
                   help="surface samples per mesh input")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("transfer", help="carry detail from one shape to another")
    _config_args(p)
    p.add_argument("--source-cloud", help="detailed source cloud (overrides config)")
    p.add_argument("--target-cloud", help="target cloud (overrides config)")
    p.add_argument("--out-dir", help="output directory (overrides config)")
    p.set_defaults(run=cmd_transfer)

    p = sub.add_parser("verify", help="check the displacement distance bounds")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--field", choices=sorted(BUILTIN_FIELDS),
                     help="analytic test field")
    src.add_argument("--bundle", help="trained bundle; its base field is checked")
    p.add_argument("--magnitudes", default="0.01,0.02,0.05",
                   help="comma-separated displacement magnitudes")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("augmented", "independent"),
                   default="augmented")
    p.add_argument("--no-normalized", action="store_true",
                   help="skip the normalized-gradient bound")
    p.add_argument("--out", default="-", help="report path, '-' for stdout")
    p.set_defaults(run=cmd_verify)
    return parser


def _config_args(p):
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--threads", type=int, help="torch thread count; "
                   "1 (the default) keeps runs fully deterministic")


def _load_run_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    return cfg


def _apply_execution(cfg, args):
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {args.threads}")
        cfg = cfg.with_overrides([f"threads={args.threads}"])
    torch.set_num_threads(cfg.threads)
    set_precision(cfg.precision)
    return cfg


def _write_manifest(out_dir, command, cfg):
    os.makedirs(out_dir, exist_ok=True)
    payload = {"tool": "dispfield", "version": __version__,
               "command": command, "config": cfg.to_dict()}
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


# ------------------------------------------------------------------ commands

def cmd_prepare(args):
    if args.count < 1:
        raise ValidationError(f"count must be >= 1, got {args.count}")
    mesh = load_mesh(args.mesh)
    mesh, transform = normalize_mesh(mesh, margin=args.margin)
    cloud = sample_surface(mesh, args.count, seed=args.seed)
    save_cloud(cloud, args.out)
    print(json.dumps({"normalization": transform.to_dict(),
                      "points": len(cloud), "out": args.out}))
    return OK


def cmd_fit(args):
    cfg = _load_run_config(args)
    overrides = []
    if args.cloud:
        overrides.append(f"cloud={args.cloud}")
    if args.out_dir:
        overrides.append(f"out_dir={args.out_dir}")
    if args.no_bounded_head:
        overrides.append("bounded_head=false")
    if args.no_attenuation:
        overrides.append("attenuate=false")
    if args.no_progressive:
        overrides.append("progressive=false")
    if overrides:
        cfg = cfg.with_overrides(overrides)
    cfg = _apply_execution(cfg, args)
    if not cfg.cloud:
        raise ConfigError("no training cloud; set `cloud` in the config "
                          "or pass --cloud")
    cloud = load_cloud(cfg.cloud)
    model = cfg.make_model()
    _write_manifest(cfg.out_dir, "fit", cfg)
    try:
        result = fit(model, cloud, cfg.train_config(), out_dir=cfg.out_dir)
    except TrainingDivergence as exc:
        path = os.path.join(cfg.out_dir, "divergence.json")
        with open(path, "w", encoding="ascii") as fh:
            json.dump({"epoch": exc.epoch, "step": exc.step,
                       "terms": exc.terms}, fh, sort_keys=True, indent=2)
            fh.write("\n")
        print(f"error: {exc}", file=sys.stderr)
        print(f"diagnostic written to {path}", file=sys.stderr)
        return NUMERIC_ERROR
    last = result.history.rows[-1] if result.history.rows else {}
    print(json.dumps({"out_dir": cfg.out_dir, "steps": result.steps,
                      "final_total": last.get("total")}))
    return OK


def cmd_mesh(args):
    model = DisplacementModel.load_bundle(args.bundle)
    if args.base_only:
        fn = model.base_sdf
    else:
        fn = lambda p: model.detail_sdf(p, on_degenerate="zero")
    grid = sample_grid(fn, args.resolution, bounds=args.bounds)
    if not np.isfinite(grid.values).all():
        raise FloatingPointError("field produced non-finite values on the grid")
    mesh = marching_cubes(grid, iso=args.iso)
    save_mesh(mesh, args.out)
    print(json.dumps({"out": args.out, "vertices": len(mesh.vertices),
                      "faces": len(mesh.faces)}))
    return OK


def _load_surface_points(path, samples, seed):
    # meshes get sampled; PLY clouds are taken as stored
    if _is_cloud_file(path):
        return load_cloud(path)
    mesh = load_mesh(path)
    return sample_surface(mesh, samples, seed=seed)


def _is_cloud_file(path):
    if not str(path).lower().endswith(".ply"):
        return False
    try:
        with open(path, "rb") as fh:
            header = fh.read(4096).split(b"end_header")[0]
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}", path=str(path))
    for line in header.splitlines():
        if line.strip().startswith(b"element face"):
            parts = line.split()
            if len(parts) == 3 and parts[2].isdigit() and int(parts[2]) > 0:
                return False
    return b"property" in header and b" nx" in header


def cmd_eval(args):
    if args.samples < 1:
        raise ValidationError(f"samples must be >= 1, got {args.samples}")
    cloud_a = _load_surface_points(args.surface_a, args.samples, args.seed)
    cloud_b = _load_surface_points(args.surface_b, args.samples, args.seed)
    report = chamfer_metrics(cloud_a, cloud_b)
    print(report.to_json())
    return OK


def cmd_transfer(args):
    cfg = _load_run_config(args)
    overrides = []
    if args.source_cloud:
        overrides.append(f"source_cloud={args.source_cloud}")
    if args.target_cloud:
        overrides.append(f"target_cloud={args.target_cloud}")
    if args.out_dir:
        overrides.append(f"out_dir={args.out_dir}")
    if overrides:
        cfg = cfg.with_overrides(overrides)
    cfg = _apply_execution(cfg, args)
    if not cfg.source_cloud or not cfg.target_cloud:
        raise ConfigError("transfer needs `source_cloud` and `target_cloud` "
                          "(config keys or flags)")
    source = load_cloud(cfg.source_cloud)
    target = load_cloud(cfg.target_cloud)
    source_base = load_cloud(cfg.source_base_cloud) if cfg.source_base_cloud else None
    target_base = load_cloud(cfg.target_base_cloud) if cfg.target_base_cloud else None
    _write_manifest(cfg.out_dir, "transfer", cfg)
    pipe, composed = transfer_pipeline(
        source, target, source_base_cloud=source_base,
        target_base_cloud=target_base, config=cfg.transfer_config(),
        base_train=cfg.train_config(), transfer_train=cfg.train_config())
    bundle_dir = os.path.join(cfg.out_dir, "target_bundle")
    composed.save_bundle(bundle_dir)
    pipe.source_model.save_bundle(os.path.join(cfg.out_dir, "source_bundle"))
    print(json.dumps({"out_dir": cfg.out_dir, "target_bundle": bundle_dir}))
    return OK


def cmd_verify(args):
    try:
        magnitudes = [float(tok) for tok in args.magnitudes.split(",") if tok]
    except ValueError as exc:
        raise ConfigError(f"bad magnitude list {args.magnitudes!r}: {exc}")
    if args.bundle:
        # the checker promotes networks to 64-bit copies internally
        field = DisplacementModel.load_bundle(args.bundle).base
    else:
        field = builtin_field(args.field)
    report = verify_bounds(field, magnitudes, sample_count=args.samples,
                           seed=args.seed, mode=args.mode,
                           include_normalized=not args.no_normalized)
    text = report.to_json()
    if args.out == "-":
        print(text)
    else:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
        print(json.dumps({"out": args.out,
                          "theorem_violations": report.theorem.violation_count,
                          "corollary_violations": report.corollary.violation_count}))
    return OK


if __name__ == "__main__":
    sys.exit(main())
