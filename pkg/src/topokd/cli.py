"""Command-line entry point: ``topokd <subcommand> [--config C] [--seed S] [--out D] [--scenes M]``.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .harness import (
    ConfigError,
    DivergenceError,
    RunConfig,
    RunReport,
    ablation_grid,
    bound_check_sweep,
    distill,
    evaluate,
    load_scene_manifest,
    make_scenes,
    train_teacher,
)
from .net import load_checkpoint, save_checkpoint
from .pointcloud import write_binary
from .tda import persistence, snapshot_betti

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("topokd")


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer: {v}")
    return v


def _config(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, default="runs/latest") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _teacher(args, out):
    path = Path(args.teacher) if args.teacher else out / "teacher.ckpt"
    if not path.exists():
        raise ConfigError(f"no teacher checkpoint at {path}; run train-teacher first")
    try:
        return load_checkpoint(path)[0]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_gen(args):
    cfg, out = _config(args), _out(args)
    manifest = {}
    for role in ("teacher", "student", "test"):
        files = []
        for i, cloud in enumerate(make_scenes(cfg, role)):
            name = f"{role}_{i:03d}.bin"
            write_binary(cloud, out / name)
            files.append({"file": name, "n_classes": cloud.n_classes})
        manifest[role] = files
    for role, files in manifest.items():
        (out / f"{role}.yaml").write_text(yaml.safe_dump({"scenes": files}, sort_keys=False))
    print(json.dumps({role: len(v) for role, v in manifest.items()}))


def cmd_train_teacher(args):
    cfg, out = _config(args), _out(args)
    rep = RunReport(out, cfg)
    net, info = train_teacher(cfg, rep)
    save_checkpoint(net, out / "teacher.ckpt", extra=info)
    rep.summary["teacher"] = info
    rep.timed("train_teacher", info["seconds"])
    rep.write_summary()
    print(json.dumps(info))


def cmd_distill(args):
    cfg, out = _config(args), _out(args)
    teacher = _teacher(args, out)
    rep = RunReport(out, cfg)
    seed = cfg.seed if args.seed is not None else cfg.seeds[0]
    t0 = time.perf_counter()
    student, hist = distill(cfg, teacher, seed, report=rep)
    ev = evaluate(student, make_scenes(cfg, "test"))
    info = {"seed": seed, "test_miou": ev.miou, "final": hist[-1]}
    save_checkpoint(student, out / "student.ckpt", extra={"seed": seed, "test_miou": ev.miou})
    rep.summary["distill"] = info
    rep.timed("distill", time.perf_counter() - t0)
    rep.write_summary()
    print(json.dumps({"seed": seed, "test_miou": ev.miou}))


def cmd_ablate(args):
    cfg, out = _config(args), _out(args)
    rep = RunReport(out, cfg)
    teacher = _teacher(args, out) if (args.teacher or (out / "teacher.ckpt").exists()) else None
    res = ablation_grid(cfg, teacher, rep)
    rep.summary["ablation"] = {k: v for k, v in res.items() if k != "cells"}
    rep.timed("ablate", res["seconds"])
    rep.write_summary()
    print(json.dumps({"median_miou": res["median_miou"],
                      "median_delta_vs_first": res["median_delta_vs_first"]}))


def cmd_eval(args):
    out = _out(args)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    try:
        net, _ = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    scenes = load_scene_manifest(args.scenes) if args.scenes else make_scenes(_config(args), "test")
    try:
        ev = evaluate(net, scenes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    (out / "eval.json").write_text(json.dumps(ev.to_dict(), indent=2))
    print(json.dumps({"miou": ev.miou, "per_class": ev.per_class}))


def cmd_tda(args):
    out = _out(args)
    scenes = load_scene_manifest(args.scenes) if args.scenes else make_scenes(_config(args), "test")
    rows = []
    for i, cloud in enumerate(scenes):
        pts = cloud.coords
        if len(pts) > args.max_points:
            idx = np.sort(np.random.default_rng(i).choice(len(pts), args.max_points, replace=False))
            pts = pts[idx]
        dgm = persistence(pts, args.maxdim)
        (out / f"diagram_{i:03d}.txt").write_text(dgm.to_text())
        row = {"scene": i, "n_points": len(pts),
               "finite": {d: len(dgm.points(d)) for d in range(args.maxdim + 1)},
               "infinite": {d: dgm.n_infinite(d) for d in range(args.maxdim + 1)},
               "expected": cloud.topology}
        if args.scales:
            scales = [float(s) for s in args.scales.split(",")]
            row["snapshot"] = snapshot_betti(pts, scales, args.maxdim).to_dict()
        rows.append(row)
    (out / "tda.json").write_text(json.dumps(rows, indent=2))
    for r in rows:
        print(json.dumps({k: r[k] for k in ("scene", "finite", "infinite")}))


def cmd_bound_check(args):
    cfg, out = _config(args), _out(args)
    rep = RunReport(out, cfg)
    res = bound_check_sweep(cfg, report=rep)
    (out / "bound_counterexamples.json").write_text(json.dumps(res["failures"], indent=2))
    rep.summary["bound_check"] = {k: v for k, v in res.items() if k != "failures"}
    rep.write_summary()
    print(json.dumps(rep.summary["bound_check"]))


def cmd_report(args):
    out = Path(args.out or "runs")
    found = sorted(out.rglob("summary.json"))
    if not found:
        raise ConfigError(f"no summary.json under {out}")
    for path in found:
        s = json.loads(path.read_text())
        print(f"== {path.parent} (version {s.get('code_version')})")
        if "teacher" in s:
            print(f"teacher train mIoU {s['teacher']['train_miou']:.4f}")
        if "distill" in s:
            print(f"student test mIoU {s['distill']['test_miou']:.4f}")
        if "ablation" in s:
            a = s["ablation"]
            for name in a["rows"]:
                print(f"{name:<12} median mIoU {a['median_miou'][name]:.4f}  "
                      f"delta {a['median_delta_vs_first'][name]:+.4f}")
        if "bound_check" in s:
            b = s["bound_check"]
            rate = b["bijective_pass_rate"]
            print(f"bound pass rate {b['pass_rate']:.3f} over {b['pairs']} pairs, bijective "
                  f"{'n/a' if rate is None else format(rate, '.3f')} over {b['bijective_pairs']}")
        for name, sec in s.get("timings", {}).items():
            print(f"time {name} {sec:.1f}s")


COMMANDS = {
    "gen": (cmd_gen, "generate teacher, student and test scenes"),
    "train-teacher": (cmd_train_teacher, "train the teacher on segmentation loss"),
    "distill": (cmd_distill, "distil a student from a trained teacher"),
    "ablate": (cmd_ablate, "run the four-row component ablation"),
    "eval": (cmd_eval, "evaluate a checkpoint"),
    "tda": (cmd_tda, "persistence diagrams of scenes"),
    "bound-check": (cmd_bound_check, "empirical W2 <= sqrt(chamfer) check"),
    "report": (cmd_report, "summarise run directories"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="topokd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"topokd {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="YAML run configuration")
        s.add_argument("--seed", type=_u64, help="run seed (unsigned 64-bit)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--scenes", help="scene manifest (YAML list of specs or files)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("distill", "ablate"):
            s.add_argument("--teacher", help="teacher checkpoint (default OUT/teacher.ckpt)")
        if name == "eval":
            s.add_argument("--checkpoint", help="network checkpoint to evaluate")
        if name == "tda":
            s.add_argument("--maxdim", type=int, default=1, choices=(0, 1, 2))
            s.add_argument("--max-points", type=int, default=64)
            s.add_argument("--scales", help="comma-separated scales for snapshot Betti numbers")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command][0](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
