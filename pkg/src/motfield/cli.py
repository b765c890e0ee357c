"""Experiment runner: scene generation, optimization, segmentation,
evaluation and gradient checking with replayable configs.

Every command writes a resolved-config snapshot (``config.json``) that
reruns the command identically, plus a ``manifest.json`` listing each
emitted file with its SHA-256 checksum. Exit codes: 0 success, 2 input
error, 3 numeric failure.

The ``MOTFIELD_THREADS`` environment variable pins the numeric thread
count; results are identical across thread counts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, skip=("manifest.json",)):
    files = {}
    for root, _, names in os.walk(out_dir):
        for name in sorted(names):
            if name in skip:
                continue
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir)
            files[rel] = _sha256(path)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump({"files": files}, f, indent=2, sort_keys=True)
    return files


def write_config(out_dir, config):
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config, f, indent=2, sort_keys=True)


def _require(path, kind="file"):
    ok = os.path.isdir(path) if kind == "dir" else os.path.isfile(path)
    if not ok:
        raise InputError(f"missing {kind}: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    from . import scenegen as sg

    spec = _require(args.scene)
    try:
        scene = sg.Scene.load(spec)
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise InputError(f"invalid scene spec {spec}: {e}") from e
    gt = sg.render(scene)
    os.makedirs(args.out, exist_ok=True)
    gt.save(args.out)
    scene.save(os.path.join(args.out, "scene.json"))
    write_config(args.out, {"command": "generate", "scene": spec,
                            "out": args.out})
    write_manifest(args.out)
    print(f"generated {args.out} ({len(gt.boxes)} objects)")
    return EXIT_OK


def load_scene_inputs(scene_dir):
    """SceneInputs + GroundTruth file handles from a generated directory."""
    from . import geometry as geo
    from . import optimize as opt
    from .csac import DetectionBox
    from .grid import read_pfm

    _require(scene_dir, "dir")
    meta_path = _require(os.path.join(scene_dir, "meta.json"))
    with open(meta_path) as f:
        meta = json.load(f)
    I1 = read_pfm(_require(os.path.join(scene_dir, "I1.pfm"))).data
    I2 = read_pfm(_require(os.path.join(scene_dir, "I2.pfm"))).data
    K = geo.Intrinsics.from_json(meta["K"])
    boxes = tuple(DetectionBox(**b) for b in meta["tight_boxes"])
    heights = tuple(meta["prior_heights"] or ())
    return opt.SceneInputs(I1=I1, I2=I2, K=K, boxes=boxes,
                           box_heights=heights), meta


def _build_plans(args):
    from . import losses, optimize as opt
    from dataclasses import replace

    phases = [int(p) for p in str(args.phases).split(",") if p]
    if phases != sorted(phases) or any(p not in (1, 2, 3) for p in phases):
        raise InputError(f"invalid phase list: {args.phases}")
    plans = []
    for phase in phases:
        w = losses.LossWeights.for_phase(phase)
        if args.no_csac and phase == 3:
            w = replace(w, lam_mr=0.0)
        plans.append(opt.PhasePlan(
            phase=phase, steps=args.epochs * args.steps_per_epoch,
            weights=w, lr=args.lr))
    return plans, phases


def cmd_optimize(args):
    from . import optimize as opt

    if args.config:
        with open(_require(args.config)) as f:
            saved = json.load(f)
        for key, value in saved.get("args", {}).items():
            setattr(args, key, value)

    inputs, meta = load_scene_inputs(args.scene_dir)
    plans, phases = _build_plans(args)
    os.makedirs(args.out, exist_ok=True)
    trace_path = os.path.join(args.out, "trace.csv")
    if os.path.exists(trace_path):
        os.remove(trace_path)

    try:
        params, trace, summaries = opt.run_schedule(
            plans, inputs, seed=args.seed, trace_path=trace_path)
    except opt.DivergenceError as e:
        e.dump(os.path.join(args.out, "divergence.json"))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    opt.save_solution(args.out, params)
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump({"phases": summaries,
                   "final": json.loads(trace[-1].to_json()) if trace else None},
                  f, indent=2, sort_keys=True)
    write_config(args.out, {
        "command": "optimize",
        "args": {"scene_dir": args.scene_dir, "phases": args.phases,
                 "epochs": args.epochs,
                 "steps_per_epoch": args.steps_per_epoch, "lr": args.lr,
                 "seed": args.seed, "no_csac": bool(args.no_csac)},
    })
    write_manifest(args.out)
    final = trace[-1].total if trace else float("nan")
    print(f"optimized phases {phases}; final loss {final:.6f}")
    return EXIT_OK


def cmd_segment(args):
    from . import csac
    from .csac import ConsensusConfig, DetectionBox
    from .grid import read_pfm, write_pgm

    run_dir = _require(args.run_dir, "dir")
    res = read_pfm(_require(os.path.join(run_dir, "res_fwd.pfm"))).data
    depth = read_pfm(_require(os.path.join(run_dir, "D2.pfm"))).data[..., 0]
    _, meta = load_scene_inputs(args.scene_dir)
    boxes = [DetectionBox(**b) for b in meta["tight_boxes"]]
    cfg = ConsensusConfig(seed=args.seed)
    _, results = csac.csac_loss(res, depth, boxes, cfg)
    seg = csac.segment(results, depth.shape, threshold=args.threshold)
    os.makedirs(args.out, exist_ok=True)
    write_pgm(os.path.join(args.out, "segment.pgm"), seg[:, :, None])
    for i, r in enumerate(results):
        r.export(args.out, i, threshold=args.threshold)

    payload = {"threshold": args.threshold,
               "boxes": [b.to_json() for b in boxes]}
    gt_mask_path = os.path.join(args.scene_dir, "mask2.pgm")
    if os.path.isfile(gt_mask_path):
        from . import evalmetrics as em
        from .grid import read_pgm
        gt_mask = read_pgm(gt_mask_path).data[..., 0]
        payload["iou"] = em.iou(seg, gt_mask > 0.5)
    with open(os.path.join(args.out, "iou.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    write_config(args.out, {"command": "segment",
                            "args": {"run_dir": args.run_dir,
                                     "scene_dir": args.scene_dir,
                                     "threshold": args.threshold,
                                     "seed": args.seed}})
    write_manifest(args.out)
    if "iou" in payload:
        print(f"segmentation IoU {payload['iou']:.4f}")
    return EXIT_OK


def cmd_eval(args):
    from . import evalmetrics as em
    from . import geometry as geo
    from .grid import read_pfm

    pred_dir = _require(args.pred_dir, "dir")
    gt_dir = _require(args.gt_dir, "dir")
    out = {}
    for name in ("D1", "D2"):
        pred = read_pfm(_require(os.path.join(pred_dir, f"{name}.pfm"))).data
        gt = read_pfm(_require(os.path.join(gt_dir, f"{name}.pfm"))).data
        m = em.depth_metrics(pred, gt, median_scale=not args.no_median_scale)
        out[name] = json.loads(m.to_json())
        print(f"{name}: {em.DepthMetrics.table_header()}")
        print(f"{name}: {m.table_row()}")
    ego_path = os.path.join(pred_dir, "ego.json")
    if os.path.isfile(ego_path):
        with open(ego_path) as f:
            pred_ego = geo.RigidMotion.from_json(json.load(f)["ego"])
        with open(_require(os.path.join(gt_dir, "meta.json"))) as f:
            gt_ego = geo.RigidMotion.from_json(json.load(f)["ego"])
        ident = geo.RigidMotion.identity()
        out["trajectory"] = em.trajectory_errors([ident, pred_ego],
                                                 [ident, gt_ego])
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
    write_config(args.out, {"command": "eval",
                            "args": {"pred_dir": args.pred_dir,
                                     "gt_dir": args.gt_dir}})
    write_manifest(args.out)
    return EXIT_OK


def cmd_gradcheck(args):
    from . import gradsuite

    results, elapsed = gradsuite.run_suite(n_fixtures=args.fixtures,
                                           tol=args.tol)
    by_name = {}
    for r in results:
        cur = by_name.setdefault(r.name, [0, 0.0])
        cur[0] += 0 if r.passed else 1
        cur[1] = max(cur[1], r.max_rel_err)
    failures = 0
    for name, (fails, worst) in by_name.items():
        status = "PASS" if fails == 0 else f"FAIL({fails})"
        print(f"{name:20s} {status:8s} max_rel_err {worst:.3e}")
        failures += fails
    print(f"{len(results)} fixtures in {elapsed:.1f}s, {failures} failures")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as f:
            json.dump({n: {"failures": v[0], "max_rel_err": v[1]}
                       for n, v in by_name.items()}, f, indent=2,
                      sort_keys=True)
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(
        prog="motfield",
        description="Differentiable depth / camera-motion / object-motion "
                    "reference engine")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic scene pair")
    g.add_argument("scene", help="scene spec JSON")
    g.add_argument("out", help="output directory")
    g.set_defaults(fn=cmd_generate)

    o = sub.add_parser("optimize", help="run the multi-phase optimization")
    o.add_argument("scene_dir", nargs="?", default=None,
                   help="generated scene directory")
    o.add_argument("out", nargs="?", default=None, help="output directory")
    o.add_argument("--config", default=None,
                   help="replay a resolved config snapshot")
    o.add_argument("--phases", default="1,2,3")
    o.add_argument("--epochs", type=int, default=10)
    o.add_argument("--steps-per-epoch", type=int, default=200)
    o.add_argument("--lr", type=float, default=1e-4)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--no-csac", action="store_true",
                   help="zero the consensus weight (ablation)")
    o.set_defaults(fn=cmd_optimize)

    s = sub.add_parser("segment", help="consensus segmentation of a run")
    s.add_argument("run_dir", help="optimize output directory")
    s.add_argument("scene_dir", help="generated scene directory")
    s.add_argument("out", help="output directory")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_segment)

    e = sub.add_parser("eval", help="depth/trajectory metrics against GT")
    e.add_argument("pred_dir")
    e.add_argument("gt_dir")
    e.add_argument("out")
    e.add_argument("--no-median-scale", action="store_true")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="gradient-vs-finite-difference suite")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--fixtures", type=int, default=20)
    c.add_argument("--out", default=None)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    threads = os.environ.get("MOTFIELD_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "optimize" and not args.config \
            and (args.scene_dir is None or args.out is None):
        print("error: scene_dir and out are required without --config",
              file=sys.stderr)
        return EXIT_INPUT
    if args.command == "optimize" and args.config and args.out is None:
        args.out = os.path.dirname(os.path.abspath(args.config))
    try:
        return args.fn(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ArithmeticError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
