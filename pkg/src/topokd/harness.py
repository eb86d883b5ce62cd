"""Run orchestration: scene sets, teacher training, distillation, ablations and reports.

Everything here is deterministic given a :class:`RunConfig` and a seed.
Scene seeds are derived from ``(run seed, role, index)`` with
``numpy.random.SeedSequence`` so the teacher set, each student transfer set
and the shared test set never overlap by accident.

Reports are written to an output directory as

* ``events.jsonl`` -- one JSON record per logged step or finished stage,
* ``summary.json`` -- configuration, code version, timings and results,
* ``ablation.csv`` -- one row per (configuration, seed) when an ablation ran.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .diagmetrics import W2_SIZE_LIMIT, bound_check, chamfer_arrays
from .kd import DistillConfig, LossBreakdown, distill_loss
from .net import Network, NetworkConfig, forward, init_network
from .pointcloud import AugmentConfig, PointCloud, SceneSpec, augment, generate_scene, grid_sample
from .tda import persistence

__all__ = [
    "ConfigError",
    "DivergenceError",
    "RunConfig",
    "RunReport",
    "EvalResult",
    "ABLATION_ROWS",
    "make_scenes",
    "train_teacher",
    "train_student",
    "distill",
    "evaluate",
    "ablation_grid",
    "bound_check_sweep",
]

log = logging.getLogger(__name__)

ROLES = {"teacher": 0, "student": 1, "test": 2, "bound": 3}

# the four on/off rows of the component ablation: (name, use grad term, use topology term)
ABLATION_ROWS = (
    ("kld+seg", False, False),
    ("+topo", False, True),
    ("+grad", True, False),
    ("+topo+grad", True, True),
)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DivergenceError(RuntimeError):
    """A training loss or gradient became non-finite."""


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


@dataclass
class RunConfig:
    """Everything a run needs, validated on construction.

    ``scenes`` describes one synthetic family and how many scenes each role
    gets; ``optim`` holds plain gradient-descent step sizes and step counts.
    """

    scenes: dict = field(default_factory=lambda: {
        "shape": "planes+objects", "n_classes": 4, "params": {},
        "teacher": 16, "student": 4, "test": 8})
    teacher: NetworkConfig = field(default_factory=NetworkConfig.teacher)
    student: NetworkConfig = field(default_factory=NetworkConfig.student)
    distill: DistillConfig = field(default_factory=DistillConfig)
    optim: dict = field(default_factory=lambda: {
        "teacher_lr": 0.1, "teacher_steps": 1000, "student_lr": 0.1, "student_steps": 300,
        "log_every": 50})
    seeds: tuple = (0, 1, 2, 3, 4)
    seed: int = 0
    augment: AugmentConfig | None = None
    grid: float | None = None
    bound_pairs: int = 200

    def __post_init__(self):
        sc = dict(self.scenes)
        try:
            SceneSpec(sc.get("shape", ""), int(sc.get("n_classes", 0)))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"scenes: {exc}") from None
        for role in ("teacher", "student", "test"):
            if int(sc.get(role, 0)) < 1:
                raise ConfigError(f"scenes.{role} must be a positive scene count")
        for key in ("teacher_lr", "student_lr"):
            v = self.optim.get(key)
            if not isinstance(v, (int, float)) or not v > 0 or not math.isfinite(v):
                raise ConfigError(f"optim.{key} must be a positive number, got {v!r}")
        for key in ("teacher_steps", "student_steps"):
            v = self.optim.get(key)
            if not isinstance(v, int) or v < 0:
                raise ConfigError(f"optim.{key} must be a non-negative integer, got {v!r}")
        if int(self.optim.get("log_every", 1)) < 1:
            raise ConfigError("optim.log_every must be >= 1")
        if self.teacher.n_classes != sc["n_classes"] or self.student.n_classes != sc["n_classes"]:
            raise ConfigError("teacher, student and scenes must agree on the class count")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.grid is not None and not self.grid > 0:
            raise ConfigError("grid must be positive when given")
        self.seeds = tuple(int(s) for s in self.seeds)

    # -- serialisation ------------------------------------------------------

    def to_dict(self):
        return {
            "scenes": copy.deepcopy(self.scenes),
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "distill": self.distill.to_dict(),
            "optim": dict(self.optim),
            "seeds": list(self.seeds),
            "seed": self.seed,
            "augment": None if self.augment is None else {
                "rotate_degrees": self.augment.rotate_degrees,
                "rotate_prob": self.augment.rotate_prob,
                "scale_range": list(self.augment.scale_range),
                "flip_prob": self.augment.flip_prob,
                "jitter_sigma": self.augment.jitter_sigma,
                "jitter_clip": self.augment.jitter_clip},
            "grid": self.grid,
            "bound_pairs": self.bound_pairs,
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a mapping")
        known = {"scenes", "teacher", "student", "distill", "optim", "seeds", "seed", "augment",
                 "grid", "bound_pairs"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        base = cls()
        try:
            scenes = {**base.scenes, **d.get("scenes", {})}
            k = int(scenes["n_classes"])
            teacher = NetworkConfig.teacher(**{"n_classes": k, **_tuples(d.get("teacher", {}))})
            student = NetworkConfig.student(**{"n_classes": k, **_tuples(d.get("student", {}))})
            dist = DistillConfig.from_dict(d.get("distill", {}))
            optim = {**base.optim, **d.get("optim", {})}
            aug = d.get("augment")
            aug = None if aug is None else AugmentConfig(
                **{**aug, **({"scale_range": tuple(aug["scale_range"])}
                             if "scale_range" in aug else {})})
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(scenes=scenes, teacher=teacher, student=student, distill=dist, optim=optim,
                   seeds=tuple(d.get("seeds", base.seeds)), seed=int(d.get("seed", 0)),
                   augment=aug, grid=d.get("grid"), bound_pairs=int(d.get("bound_pairs", 200)))

    @classmethod
    def from_yaml(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)

    def dump_yaml(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# reports


class RunReport:
    """Append-only event stream plus a summary document in ``out``.

    An existing ``summary.json`` in ``out`` is extended rather than replaced.
    """

    def __init__(self, out, cfg: RunConfig | None = None):
        self.out = Path(out) if out is not None else None
        self.summary = {"code_version": __version__,
                        "config": cfg.to_dict() if cfg is not None else None,
                        "timings": {}}
        self.events = []
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            # subcommands sharing a directory accumulate sections and timings
            prev = self.out / "summary.json"
            if prev.exists():
                try:
                    old = json.loads(prev.read_text())
                except ValueError:
                    old = {}
                timings = {**old.get("timings", {})}
                self.summary = {**old, **self.summary, "timings": timings}

    def event(self, kind, **payload):
        rec = {"kind": kind, **payload}
        self.events.append(rec)
        if self.out is not None:
            with open(self.out / "events.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True, default=_jsonable) + "\n")

    def timed(self, name, seconds):
        self.summary["timings"][name] = seconds

    def write_summary(self):
        if self.out is not None:
            (self.out / "summary.json").write_text(
                json.dumps(self.summary, indent=2, sort_keys=True, default=_jsonable))
        return self.summary

    def write_csv(self, name, rows):
        if self.out is None or not rows:
            return
        with open(self.out / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not serialisable: {type(x)}")


# ---------------------------------------------------------------------------
# scenes


def make_scenes(cfg: RunConfig, role, count=None, seed=None):
    """Scenes for ``role`` ("teacher", "student", "test" or "bound")."""
    sc = cfg.scenes
    count = int(sc[role]) if count is None else int(count)
    seed = cfg.seed if seed is None else seed
    out = []
    for i in range(count):
        spec = SceneSpec(sc["shape"], int(sc["n_classes"]), _derive_seed(seed, ROLES[role], i),
                         dict(sc.get("params", {})))
        cloud = generate_scene(spec)
        if cfg.grid is not None:
            cloud = grid_sample(cloud, cfg.grid)
        out.append(cloud)
    return out


# ---------------------------------------------------------------------------
# training


def _check_finite(value, step, what):
    if not np.isfinite(value):
        raise DivergenceError(f"{what} became non-finite at step {step} (value {value})")


def _gd(net: Network, scenes, lr, steps, step_fn, report=None, tag="train", log_every=50,
        aug=None, aug_seed=0):
    """Full-batch plain gradient descent; ``step_fn(trace_index, cloud) -> (loss, grads, extra)``."""
    history = []
    for step in range(steps + 1):
        if aug is not None and step < steps:
            batch = [augment(c, aug, _derive_seed(aug_seed, step, i)) for i, c in enumerate(scenes)]
        else:
            batch = scenes
        total = {k: np.zeros_like(v) for k, v in net.params.items()}
        loss, extras = 0.0, []
        for i, cloud in enumerate(batch):
            value, grads, extra = step_fn(i, cloud, aug is not None)
            loss += value
            extras.append(extra)
            for k, g in grads.items():
                total[k] += g
        loss /= len(batch)
        _check_finite(loss, step, f"{tag} loss")
        rec = {"step": step, "loss": loss}
        if extras and extras[0]:
            rec.update({k: float(np.mean([e[k] for e in extras])) for k in extras[0]
                        if isinstance(extras[0][k], (int, float))})
        history.append(rec)
        if report is not None and (step % log_every == 0 or step == steps):
            report.event(tag, **rec)
        if step == steps:
            break
        for k in net.params:
            g = total[k] / len(batch)
            _check_finite(float(np.abs(g).sum()), step, f"{tag} gradient {k}")
            net.params[k] = net.params[k] - lr * g
    return history


def _ce_step(net: Network, scenes):
    traces = [net.build(c, c.labels) for c in scenes]

    def step(i, cloud, fresh):
        tr = net.build(cloud, cloud.labels) if fresh else traces[i]
        net.run(tr, [tr.loss_node])
        names = list(net.params)
        grads = tr.graph.backward([tr.graph.params[n] for n in names], tr.loss_node)
        return float(tr.graph[tr.loss_node]), dict(zip(names, grads)), {}

    return step


def train_teacher(cfg: RunConfig, report: RunReport | None = None, seed=None):
    """Train the teacher on segmentation loss alone; returns ``(network, info)``."""
    seed = cfg.seed if seed is None else seed
    t0 = time.perf_counter()
    scenes = make_scenes(cfg, "teacher", seed=seed)
    net = init_network(NetworkConfig.from_dict({**cfg.teacher.to_dict(), "seed":
                                                _derive_seed(seed, 10)}))
    hist = _gd(net, scenes, cfg.optim["teacher_lr"], cfg.optim["teacher_steps"],
               _ce_step(net, scenes), report, "teacher", int(cfg.optim.get("log_every", 50)),
               cfg.augment, _derive_seed(seed, 11))
    ev = evaluate(net, scenes)
    info = {"train_miou": ev.miou, "final_loss": hist[-1]["loss"],
            "seconds": time.perf_counter() - t0, "n_params": net.n_params()}
    if report is not None:
        report.event("teacher_done", **info)
    return net, info


def _student_init(cfg: RunConfig, seed):
    return init_network(NetworkConfig.from_dict({**cfg.student.to_dict(),
                                                 "seed": _derive_seed(seed, 20)}))


def train_student(cfg: RunConfig, seed, report: RunReport | None = None):
    """The no-distillation reference: student trained on segmentation loss alone."""
    scenes = make_scenes(cfg, "student", seed=seed)
    net = _student_init(cfg, seed)
    hist = _gd(net, scenes, cfg.optim["student_lr"], cfg.optim["student_steps"],
               _ce_step(net, scenes), report, "student", int(cfg.optim.get("log_every", 50)),
               cfg.augment, _derive_seed(seed, 21))
    return net, hist


def distill(cfg: RunConfig, teacher: Network, seed, dcfg: DistillConfig | None = None,
            report: RunReport | None = None, tag="distill"):
    """Train a fresh student against the frozen ``teacher``; returns ``(student, history)``.

    Every logged record carries the full loss breakdown; totals are checked
    against the weighted sum of their parts.
    """
    dcfg = dcfg or cfg.distill
    scenes = make_scenes(cfg, "student", seed=seed)
    net = _student_init(cfg, seed)
    t_traces = [forward(teacher, c) for c in scenes]
    s_traces = [net.build(c) for c in scenes]
    frozen = teacher.flat()

    def step(i, cloud, fresh):
        tt = forward(teacher, cloud) if fresh else t_traces[i]
        ts = net.build(cloud) if fresh else s_traces[i]
        br: LossBreakdown = distill_loss(tt, ts, cloud.labels, dcfg, net)
        if abs(br.total - br.recompute_total()) > 1e-12 * max(1.0, abs(br.total)):
            raise AssertionError("loss breakdown does not add up")
        extra = {k: v for k, v in br.to_dict().items() if isinstance(v, float)}
        extra["tie_events"] = br.tie_events
        for k, v in br.norms.items():
            extra[f"norm_{k}"] = v
        return br.total, br.param_grads, extra

    hist = _gd(net, scenes, cfg.optim["student_lr"], cfg.optim["student_steps"], step, report,
               tag, int(cfg.optim.get("log_every", 50)), cfg.augment, _derive_seed(seed, 21))
    if not np.array_equal(frozen, teacher.flat()):
        raise AssertionError("teacher parameters changed during distillation")
    return net, hist


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    miou: float
    per_scene: list
    per_class: list
    confusion: np.ndarray

    def to_dict(self):
        return {"miou": self.miou, "per_scene": self.per_scene, "per_class": self.per_class,
                "confusion": self.confusion.tolist()}


def evaluate(net: Network, scenes) -> EvalResult:
    """Deterministic inference; mIoU pooled over all points plus per-scene values.

    Classes absent from both prediction and ground truth are left out of the
    mean (their IoU is reported as ``None``).
    """
    k = net.cfg.n_classes
    conf = np.zeros((k, k), dtype=np.int64)
    per_scene = []
    for c in scenes:
        if c.labels is None:
            raise ValueError("evaluation needs labelled scenes")
        if c.n_classes is not None and c.n_classes > k:
            raise ValueError(f"scene has {c.n_classes} classes, network predicts {k}")
        pred = net.predict(c)
        cm = np.zeros((k, k), dtype=np.int64)
        np.add.at(cm, (c.labels, pred), 1)
        conf += cm
        per_scene.append(_miou_from_confusion(cm)[0])
    miou, per_class = _miou_from_confusion(conf)
    return EvalResult(miou, per_scene, per_class, conf)


def _miou_from_confusion(cm):
    inter = np.diag(cm).astype(float)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    present = union > 0
    iou = np.where(present, inter / np.maximum(union, 1), np.nan)
    per_class = [None if np.isnan(v) else float(v) for v in iou]
    return (float(iou[present].mean()) if present.any() else 0.0), per_class


# ---------------------------------------------------------------------------
# ablation


def ablation_grid(cfg: RunConfig, teacher: Network | None = None, report=None, rows=None):
    """Train every ablation row on every paired seed and compare on the shared test set.

    Returns a dict with per-(row, seed) results, per-row medians and the
    per-seed differences against the first row, aggregated by median.
    """
    t0 = time.perf_counter()
    if teacher is None:
        teacher, _ = train_teacher(cfg, report)
    test = make_scenes(cfg, "test")
    rows = rows or ABLATION_ROWS
    base = cfg.distill
    results = []
    for seed in cfg.seeds:
        for name, use_grad, use_topo in rows:
            dcfg = DistillConfig.from_dict({**base.to_dict(),
                                            "lambda_grad": base.lambda_grad if use_grad else 0.0,
                                            "use_topo": use_topo})
            r0 = time.perf_counter()
            student, hist = distill(cfg, teacher, seed, dcfg, report, tag=f"distill[{name}]")
            ev = evaluate(student, test)
            rec = {"row": name, "seed": seed, "test_miou": ev.miou,
                   "final_total": hist[-1]["loss"], "final_grad": hist[-1].get("grad"),
                   "final_topo": hist[-1].get("topo"), "seconds": time.perf_counter() - r0}
            results.append(rec)
            if report is not None:
                report.event("ablation_cell", **rec)
    names = [r[0] for r in rows]
    by = {(r["row"], r["seed"]): r["test_miou"] for r in results}
    medians = {n: float(np.median([by[n, s] for s in cfg.seeds])) for n in names}
    deltas = {n: float(np.median([by[n, s] - by[names[0], s] for s in cfg.seeds]))
              for n in names}
    out = {"rows": names, "cells": results, "median_miou": medians,
           "median_delta_vs_first": deltas, "seconds": time.perf_counter() - t0}
    if report is not None:
        report.event("ablation_done", median_miou=medians, median_delta_vs_first=deltas)
        report.write_csv("ablation.csv", results)
    return out


# ---------------------------------------------------------------------------
# bound check


def _nn_bijective(a, b):
    if len(a) != len(b) or len(a) == 0:
        return False
    _, ab, _ = chamfer_arrays(a, b)
    return len(set(ab.tolist())) == len(a)


def bound_check_sweep(cfg: RunConfig, n_pairs=None, m=12, report=None, seed=None):
    """Empirical pass rate of ``W2 <= sqrt(chamfer)`` on diagrams of scene subsamples.

    Even pairs compare two random ``m``-point subsamples of generated scenes;
    odd pairs compare a subsample with a jittered copy of itself. Rates (None when no pair qualifies) are reported overall and on the pairs whose
    nearest-neighbour map is a bijection; failures are returned verbatim.
    """
    n_pairs = cfg.bound_pairs if n_pairs is None else int(n_pairs)
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(_derive_seed(seed, ROLES["bound"]))
    scenes = make_scenes(cfg, "test", seed=seed)
    total = passed = bij = bij_passed = 0
    failures = []
    while total < n_pairs:
        pts = []
        for _ in range(2):
            c = scenes[int(rng.integers(len(scenes)))]
            pts.append(c.coords[rng.choice(len(c), min(m, len(c)), replace=False)])
        if total % 2:
            # nearby pair: the same subsample, slightly jittered
            pts[1] = pts[0] + rng.normal(scale=0.005, size=pts[0].shape)
        d1, d2 = persistence(pts[0], 1), persistence(pts[1], 1)
        size = sum(len(d.points(k)) for d in (d1, d2) for k in (0, 1))
        if size > W2_SIZE_LIMIT:
            continue
        rep = bound_check(d1, d2)
        total += 1
        passed += rep.satisfied
        is_bij = all(_nn_bijective(d1.points(k), d2.points(k)) or
                     (len(d1.points(k)) == 0 and len(d2.points(k)) == 0) for k in (0, 1))
        bij += is_bij
        bij_passed += is_bij and rep.satisfied
        if not rep.satisfied:
            failures.append({"report": rep.to_dict(), "d1": d1.to_text(), "d2": d2.to_text()})
    out = {"pairs": total, "pass_rate": passed / total if total else None,
           "bijective_pairs": bij, "bijective_pass_rate": bij_passed / bij if bij else None,
           "failures": failures}
    if report is not None:
        report.event("bound_check", **{k: v for k, v in out.items() if k != "failures"},
                     n_failures=len(failures))
    return out


def load_scene_manifest(path) -> list:
    """Read a scene manifest: YAML/JSON list of scene specs or point-cloud file paths."""
    from .pointcloud import read_binary, read_text

    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read scene manifest {path}: {exc}") from None
    items = data.get("scenes") if isinstance(data, dict) else data
    if not isinstance(items, list) or not items:
        raise ConfigError(f"{path}: expected a non-empty list of scenes")
    out = []
    for item in items:
        if isinstance(item, str):
            f = (path.parent / item) if not Path(item).is_absolute() else Path(item)
            out.append(read_binary(f) if f.suffix == ".bin" else read_text(f))
        elif isinstance(item, dict) and "file" in item:
            f = path.parent / item["file"]
            k = item.get("n_classes")
            out.append(read_binary(f, k) if f.suffix == ".bin" else read_text(f, k))
        elif isinstance(item, dict):
            try:
                out.append(generate_scene(SceneSpec.from_dict(item)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"{path}: bad scene spec {item!r}: {exc}") from None
        else:
            raise ConfigError(f"{path}: cannot interpret scene entry {item!r}")
    return out


def summarise_cloud(cloud: PointCloud):
    return {"n_points": len(cloud), "n_classes": cloud.n_classes,
            "topology": cloud.topology}
