"""Command line: run, check, stats, gen, table."""
import argparse
import json
import os
import sys
import time

import numpy as np

from .. import attention, backbone, geometry, partition, tensorio
from ..config import BLOCK_KINDS, ConfigError, load
from .scene import load_scene, scene_for


def _config(args):
    cfg = load(args.config)
    override = {}
    if getattr(args, "seed", None) is not None:
        override["run"] = {"seed": args.seed}
    if getattr(args, "blocks", None):
        seq = [b.strip().lower() for b in args.blocks.split(",") if b.strip()]
        if not seq or any(b not in BLOCK_KINDS for b in seq):
            raise ConfigError(f"--blocks expects a comma list of {', '.join(BLOCK_KINDS)}")
        override["blocks"] = {"sequence": seq}
    if getattr(args, "serial", False):
        override.setdefault("run", {})["serial"] = True
    return cfg.replace(**override) if override else cfg


def _inputs(cfg, args):
    if getattr(args, "scene", None):
        sc = load_scene(args.scene)
    else:
        sc = scene_for(cfg)
    return sc


def execute(cfg, sc=None, table_cache=None):
    """Run the configured pipeline once; returns (bev, model, weights, scene, block outputs)."""
    sc = sc or scene_for(cfg)
    weights = attention.BackboneWeights.create(cfg.attention, cfg.blocks.num_layers, seed=cfg.seed)
    table = None
    if "inter3d" in cfg.blocks.sequence:
        table = geometry.cached_table(cfg.pseudo_grid, cfg.bounds, sc.rig, table_cache, cfg.bucket_size)
    serial = bool(cfg.run.get("serial", False))
    model = backbone.Backbone(cfg, weights, sc.rig, table, serial)
    tokens = model.forward(model.tokenize(sc.cloud, sc.images), keep=True)
    return model.bev(tokens), model, weights, sc, model.outputs


def cmd_run(args):
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    bev, model, weights, sc, dumps = execute(cfg, _inputs(cfg, args), args.table_cache)
    tensorio.save(os.path.join(args.out, "bev.utr"), bev.to_tensors())
    if args.dump_intermediate:
        for i, (kind, tok) in enumerate(zip(cfg.blocks.sequence, dumps)):
            tensorio.save(os.path.join(args.out, f"tokens_{i}_{kind}.utr"), {
                "features": tok.features.astype(np.float32),
                "coords": tok.coords,
                "modality": tok.modality,
            })
    manifest = {
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "serial": model.serial,
        "blocks": list(cfg.blocks.sequence),
        "dispatches": {
            "total": model.counter.total,
            "per_block": [t.dispatches for t in model.traces],
            "expected": backbone.expected_dispatches(cfg.blocks),
        },
        "mixed_sets": [t.mixed_sets() for t in model.traces],
        "tokens": {"lidar": int(dumps[-1].num_lidar), "image": int(dumps[-1].num_image)},
        "bev_shape": list(bev.features.shape),
        "bev_occupied": int(bev.mask.sum()),
        "weights": {"seed": weights.seed, "tensors": len(weights.tensors)},
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "timings.json"), "w") as fh:
        json.dump({"per_block_seconds": [round(t.seconds, 6) for t in model.traces]}, fh, indent=2)
    print(f"wrote {args.out}: bev {tuple(bev.features.shape)}, dispatches {model.counter.total}")
    return 0


def cmd_stats(args):
    cfg = _config(args)
    _, model, _, _, _ = execute(cfg, _inputs(cfg, args), args.table_cache)
    report = []
    for b, trace in enumerate(model.traces):
        parts = []
        slots = tokens = 0
        for label, part, _ in trace.partitions:
            st = partition.partition_stats(part)
            st["label"] = label
            parts.append(st)
            slots += st["slots"]
            tokens += st["tokens"]
        report.append({
            "block": b,
            "kind": trace.kind,
            "dispatches": trace.dispatches,
            "mixed_sets": trace.mixed_sets(),
            "duplication_rate": (slots - tokens) / tokens if tokens else 0.0,
            "partitions": parts,
        })
    json.dump(report, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_gen(args):
    cfg = _config(args)
    sc = scene_for(cfg)
    sc.save(args.out)
    print(f"wrote scene seed={sc.seed} points={len(sc.cloud)} images={sc.images.shape} to {args.out}")
    return 0


def cmd_table(args):
    cfg = _config(args)
    rig = load_scene(args.scene).rig if args.scene else cfg.rig()
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "pseudo_depth.utr")
    if os.path.exists(path):
        table = geometry.load_table(path)
        if table.matches(cfg.pseudo_grid, cfg.bounds, rig):
            print(f"cached table at {path} is valid ({table.num_points} points)")
            return 0
    t0 = time.perf_counter()
    table = geometry.build_pseudo_depth_table(cfg.pseudo_grid, cfg.bounds, rig, cfg.bucket_size)
    geometry.save_table(path, table)
    per_view = [int((table.view == b).sum()) for b in range(len(rig))]
    print(f"built table {cfg.pseudo_grid} in {time.perf_counter() - t0:.2f}s: {table.num_points} points, per view {per_view}")
    return 0


def cmd_check(args):
    from .checks import run_checks

    return run_checks(names=args.only, quick=args.quick)


def build_parser():
    p = argparse.ArgumentParser(prog="bevfuse", description="Multi-modal set-attention backbone, forward only.")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, out_default="out"):
        sp.add_argument("--config", default="default", help="preset name or JSON file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--blocks", default=None, help="comma list, e.g. intra,inter3d,inter2d,inter2d")
        sp.add_argument("--out", default=out_default)

    r = sub.add_parser("run", help="run the backbone and dump the BEV grid and manifest")
    common(r)
    r.add_argument("--serial", action="store_true", help="force the serial reference path")
    r.add_argument("--dump-intermediate", action="store_true")
    r.add_argument("--scene", default=None, help="scene directory written by 'gen'")
    r.add_argument("--table-cache", default=None)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("stats", help="partition statistics per block")
    common(s)
    s.add_argument("--serial", action="store_true")
    s.add_argument("--scene", default=None)
    s.add_argument("--table-cache", default=None)
    s.set_defaults(func=cmd_stats)

    g = sub.add_parser("gen", help="write a synthetic scene")
    common(g, out_default="scene")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("table", help="build and cache a pseudo depth table")
    common(t, out_default="cache")
    t.add_argument("--scene", default=None)
    t.set_defaults(func=cmd_table)

    c = sub.add_parser("check", help="run the invariant and oracle suite")
    c.add_argument("--only", action="append", default=None, help="run only the named check (repeatable)")
    c.add_argument("--quick", action="store_true", help="skip the full-size acceptance runs")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"bevfuse: config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
