"""Distillation losses: topology (Chamfer on persistence diagrams), gradient-guided
saliency alignment, softened-logit KL divergence and segmentation, plus their
weighted sum and the topology-gradient norm clamp.

Teacher quantities are constants throughout; only the student receives
gradients. The channel importance weights are likewise treated as constants
when differentiating the student's saliency maps, since they are themselves
first derivatives of the task loss.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import minmax
from .diagmetrics import chamfer_arrays, chamfer_grad
from .net import ForwardTrace, Network, activation_gradients, cross_entropy_node, stage_pairing
from .tda import persistence, subsample_for_tda

__all__ = [
    "DistillConfig",
    "LossBreakdown",
    "TopoResult",
    "importance_weights",
    "scale_features",
    "saliency_map",
    "grad_align_loss",
    "kld_loss",
    "topo_loss",
    "clamp_topo_gradient",
    "distill_loss",
]


@dataclass(frozen=True)
class DistillConfig:
    """Weights and knobs of the distillation objective.

    ``alpha`` bounds the topology gradient by ``alpha`` times the norm of the
    alignment-loss gradient at the same feature map; the alignment loss plays
    the role of the feature loss in that bound.
    """

    lambda_grad: float = 1.0
    lambda_kld: float = 1.0
    lambda_seg: float = 1.0
    use_topo: bool = True
    alpha: float = 0.5
    clamp: bool = True
    temperature: float = 1.0
    kld_direction: str = "teacher||student"
    topo_subsample: int = 128
    topo_maxdim: int = 0
    topo_stage: int = -1
    topo_seed: int = 0
    tie_probe: float = 1e-9
    pairing: tuple | None = None

    def __post_init__(self):
        for name in ("lambda_grad", "lambda_kld", "lambda_seg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.kld_direction not in ("teacher||student", "student||teacher"):
            raise ValueError(f"unknown kld_direction {self.kld_direction!r}")
        if self.topo_subsample < 2:
            raise ValueError("topo_subsample must be at least 2")
        if self.topo_maxdim not in (0, 1, 2):
            raise ValueError("topo_maxdim must be 0, 1 or 2")

    def to_dict(self):
        d = asdict(self)
        if d["pairing"] is not None:
            d["pairing"] = list(d["pairing"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("pairing") is not None:
            d["pairing"] = tuple(d["pairing"])
        return cls(**d)


@dataclass
class LossBreakdown:
    topo: float
    grad: float
    kld: float
    seg: float
    total: float
    lambdas: tuple
    norms: dict = field(default_factory=dict)
    tie_events: int = 0
    param_grads: dict | None = field(default=None, repr=False)

    def recompute_total(self):
        l1, l2, l3 = self.lambdas
        return self.topo + l1 * self.grad + l2 * self.kld + l3 * self.seg

    def to_dict(self):
        return {"topo": self.topo, "grad": self.grad, "kld": self.kld, "seg": self.seg,
                "total": self.total, "lambdas": list(self.lambdas), "norms": dict(self.norms),
                "tie_events": self.tie_events}


# ---------------------------------------------------------------------------
# gradient-guided alignment


def importance_weights(activation_grads):
    """Per-channel mean absolute task-loss gradient for each stage."""
    out = []
    for g in activation_grads:
        g = np.asarray(g, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] == 0 or g.shape[1] == 0:
            raise ValueError(f"stage gradient must be a non-empty N x C matrix, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("activation gradients must be finite")
        out.append(np.abs(g).mean(axis=0))
    return out


def scale_features(features, weights):
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if features.ndim != 2 or weights.shape != (features.shape[1],):
        raise ValueError(f"cannot scale {features.shape} features by weights {weights.shape}")
    return features * weights


def saliency_map(scaled):
    """Channel-summed magnitude per point, min-max normalised (constant input gives zeros)."""
    scaled = np.asarray(scaled, dtype=np.float64)
    if scaled.ndim != 2 or scaled.shape[0] < 1:
        raise ValueError("saliency_map expects an N x C matrix with N >= 1")
    return minmax(np.abs(scaled).sum(axis=1))


def grad_align_loss(maps_t, maps_s) -> float:
    if len(maps_t) != len(maps_s):
        raise ValueError(f"{len(maps_t)} teacher maps vs {len(maps_s)} student maps")
    total, n = 0.0, None
    for mt, ms in zip(maps_t, maps_s):
        mt, ms = np.asarray(mt, dtype=np.float64), np.asarray(ms, dtype=np.float64)
        if mt.shape != ms.shape or (n is not None and mt.shape[0] != n):
            raise ValueError("paired saliency maps must all have the same length")
        n = mt.shape[0]
        total += np.abs(mt - ms).sum()
    return total / n if n else 0.0


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kld_loss(teacher_logits, student_logits, temperature=1.0,
             direction="teacher||student") -> float:
    """Mean over points of ``T^2 * KL`` between temperature-softened distributions."""
    zt = np.asarray(teacher_logits, dtype=np.float64)
    zs = np.asarray(student_logits, dtype=np.float64)
    if zt.shape != zs.shape or zt.ndim != 2:
        raise ValueError(f"logit shapes differ: {zt.shape} vs {zs.shape}")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    lt, ls = _log_softmax(zt / temperature), _log_softmax(zs / temperature)
    if direction == "student||teacher":
        lt, ls = ls, lt
    p = np.exp(lt)
    return float(temperature ** 2 * (np.sum(p * lt) - np.sum(p * ls)) / zt.shape[0])


# ---------------------------------------------------------------------------
# topology


@dataclass
class TopoResult:
    value: float
    grad: np.ndarray
    tie_events: int
    index: np.ndarray
    teacher_diagram: object = None
    student_diagram: object = None


def _edge_length_grad(points, edge):
    a, b = edge
    diff = points[a] - points[b]
    length = np.sqrt(diff @ diff)
    if length == 0:
        return None
    return diff / length


def _critical_keys(dgm, dim):
    sel = dgm.select(dim)
    return [(dim, dgm.birth_edge[i], dgm.death_edge[i]) for i in sel]


def topo_loss(teacher_features, student_features, cfg: DistillConfig | None = None,
              index=None, teacher_diagram=None) -> TopoResult:
    """Chamfer distance between teacher and student persistence diagrams.

    Both feature matrices are restricted to the same row subsample. The
    returned gradient is with respect to the full student feature matrix:
    each student diagram coordinate equals the length of a critical edge, so
    its Chamfer derivative is pushed onto the two endpoint rows. A diagram
    point whose critical edges change under a ``cfg.tie_probe`` perturbation
    gets no gradient and is counted in ``tie_events``.
    """
    cfg = cfg or DistillConfig()
    ft = np.asarray(teacher_features, dtype=np.float64)
    fs = np.asarray(student_features, dtype=np.float64)
    if ft.shape[0] != fs.shape[0]:
        raise ValueError("teacher and student features must cover the same points")
    n = fs.shape[0]
    if index is None:
        _, index = subsample_for_tda(fs, min(cfg.topo_subsample, n), cfg.topo_seed)
    xs = fs[index]
    dt = teacher_diagram if teacher_diagram is not None else persistence(ft[index],
                                                                          cfg.topo_maxdim)
    ds = persistence(xs, cfg.topo_maxdim)
    probe_keys = set()
    if cfg.tie_probe > 0:
        rng = np.random.default_rng(cfg.topo_seed + 1)
        probe = persistence(xs + cfg.tie_probe * rng.standard_normal(xs.shape), cfg.topo_maxdim)
        for d in range(cfg.topo_maxdim + 1):
            probe_keys.update(_critical_keys(probe, d))
    value = 0.0
    grad_sub = np.zeros_like(xs)
    ties = 0
    for d in range(cfg.topo_maxdim + 1):
        a = dt.points(d)
        sel = ds.select(d)
        b = np.column_stack([ds.birth[sel], ds.death[sel]])
        value += chamfer_arrays(a, b)[0]
        gb = chamfer_grad(a, b)
        for r, i in enumerate(sel):
            if cfg.tie_probe > 0 and (d, ds.birth_edge[i], ds.death_edge[i]) not in probe_keys:
                ties += 1
                continue
            for coord, edge in ((0, ds.birth_edge[i]), (1, ds.death_edge[i])):
                if edge is None or gb[r, coord] == 0:
                    continue
                u = _edge_length_grad(xs, edge)
                if u is None:
                    continue
                grad_sub[edge[0]] += gb[r, coord] * u
                grad_sub[edge[1]] -= gb[r, coord] * u
    grad = np.zeros_like(fs)
    grad[index] = grad_sub
    return TopoResult(float(value), grad, ties, np.asarray(index), dt, ds)


def clamp_topo_gradient(g_topo, g_feat, alpha):
    """Rescale ``g_topo`` so that its norm is at most ``alpha * |g_feat|``."""
    g_topo = np.asarray(g_topo, dtype=np.float64)
    g_feat = np.asarray(g_feat, dtype=np.float64)
    if g_topo.shape != g_feat.shape:
        raise ValueError(f"gradient shapes differ: {g_topo.shape} vs {g_feat.shape}")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    limit = alpha * np.linalg.norm(g_feat)
    norm = np.linalg.norm(g_topo)
    if norm <= limit:
        return g_topo.copy()
    if limit == 0:
        return np.zeros_like(g_topo)
    return g_topo * (limit / norm)


# ---------------------------------------------------------------------------
# composed objective


def _teacher_terms(trace_t: ForwardTrace, labels, cfg: DistillConfig):
    key = ("kd-teacher", cfg.temperature, cfg.topo_subsample, cfg.topo_seed, cfg.topo_maxdim,
           cfg.topo_stage)
    if key in trace_t.cache:
        return trace_t.cache[key]
    g = trace_t.graph
    if trace_t.loss_node is None:
        trace_t.loss_node = cross_entropy_node(g, trace_t.logits_node, labels,
                                               trace_t.logits_node.shape[1])
    g.evaluate({}, [trace_t.loss_node], reuse=True)
    trace_t.refresh()
    weights = importance_weights(activation_gradients(trace_t))
    maps = [saliency_map(scale_features(f, w)) for f, w in zip(trace_t.features, weights)]
    log_p = _log_softmax(trace_t.logits / cfg.temperature)
    feats = trace_t.features[cfg.topo_stage]
    n = feats.shape[0]
    _, index = subsample_for_tda(feats, min(cfg.topo_subsample, n), cfg.topo_seed)
    terms = {
        "maps": maps,
        "weights": weights,
        "log_p": log_p,
        "features": feats,
        "index": index,
        "diagram": persistence(feats[index], cfg.topo_maxdim),
    }
    trace_t.cache[key] = terms
    return terms


def _student_nodes(trace_s: ForwardTrace, teacher, labels, cfg: DistillConfig):
    key = ("kd-student", cfg.lambda_grad, cfg.lambda_kld, cfg.lambda_seg, cfg.temperature,
           cfg.kld_direction, cfg.pairing, id(teacher))
    if key in trace_s.cache:
        return trace_s.cache[key]
    g = trace_s.graph
    n, k = trace_s.logits_node.shape
    if trace_s.loss_node is None:
        trace_s.loss_node = cross_entropy_node(g, trace_s.logits_node, labels, k)
    seg = trace_s.loss_node
    n_s, n_t = len(trace_s.stage_nodes), len(teacher["maps"])
    pairing = list(cfg.pairing) if cfg.pairing is not None else stage_pairing(n_s, n_t)
    if len(pairing) != n_s:
        raise ValueError(f"pairing lists {len(pairing)} stages, student has {n_s}")
    weight_inputs, align = [], []
    for s, t in enumerate(pairing):
        f = trace_s.stage_nodes[s]
        w = g.input(f"kd.w{s}", (f.shape[1],))
        weight_inputs.append(w)
        m = g.minmax_normalize(g.sum(g.abs(g.col_scale(f, w)), axis=1))
        align.append(g.sum(g.abs(m - g.const(teacher["maps"][t]))))
    grad_term = align[0]
    for term in align[1:]:
        grad_term = grad_term + term
    grad_term = g.scale(grad_term, 1.0 / n)
    temp = cfg.temperature
    log_q = g.log_softmax(g.scale(trace_s.logits_node, 1.0 / temp))
    log_p = teacher["log_p"]
    p = np.exp(log_p)
    if cfg.kld_direction == "teacher||student":
        cross = g.sum(g.mul(g.const(p), log_q))
        kld = g.scale(g.sub(g.const(np.sum(p * log_p)), cross), temp ** 2 / n)
    else:
        q = g.exp(log_q)
        kld = g.scale(g.sum(g.mul(q, g.sub(log_q, g.const(log_p)))), temp ** 2 / n)
    objective = (g.scale(grad_term, cfg.lambda_grad) + g.scale(kld, cfg.lambda_kld)
                 + g.scale(seg, cfg.lambda_seg))
    nodes = {"seg": seg, "grad": grad_term, "kld": kld, "objective": objective,
             "weights": weight_inputs, "pairing": pairing}
    trace_s.cache[key] = nodes
    return nodes


def distill_loss(trace_t: ForwardTrace, trace_s: ForwardTrace, labels, cfg: DistillConfig,
                 student: Network | None = None) -> LossBreakdown:
    """Evaluate the full objective on one cloud and the student's parameter gradient.

    ``trace_s`` may be an unevaluated graph from ``Network.build``; it is run
    with ``student``'s parameters (or the parameters it was last run with).
    The topology gradient is clamped before being injected at the topology
    feature map. ``LossBreakdown.param_grads`` holds the gradient of ``total``.
    """
    if trace_t.n_points != trace_s.n_points:
        raise ValueError("teacher and student traces come from different clouds")
    teacher = _teacher_terms(trace_t, labels, cfg)
    nodes = _student_nodes(trace_s, teacher, labels, cfg)
    g = trace_s.graph
    params = student.params if student is not None else trace_s.params
    g.evaluate({"x": trace_s.cache["x"], **params}, [nodes["seg"]])
    trace_s.params = params
    trace_s.refresh()
    weights = importance_weights(activation_gradients(trace_s, nodes["seg"]))
    g.evaluate({f"kd.w{s}": w for s, w in enumerate(weights)}, [nodes["objective"]], reuse=True)
    seg, grad, kld = (float(g[nodes[n]]) for n in ("seg", "grad", "kld"))
    norms = {}
    extra = {}
    topo, ties = 0.0, 0
    if cfg.use_topo:
        topo_node = trace_s.stage_nodes[cfg.topo_stage]
        res = topo_loss(teacher["features"], g[topo_node], cfg, teacher["index"],
                        teacher["diagram"])
        topo, ties = res.value, res.tie_events
        (g_feat,) = g.backward([topo_node], nodes["grad"])
        g_topo = clamp_topo_gradient(res.grad, g_feat, cfg.alpha) if cfg.clamp else res.grad
        norms.update(topo_raw=float(np.linalg.norm(res.grad)),
                     topo=float(np.linalg.norm(g_topo)), feat=float(np.linalg.norm(g_feat)))
        extra[topo_node] = g_topo
    names = list(params)
    grads = g.backward([g.params[n] for n in names], nodes["objective"], extra=extra)
    param_grads = dict(zip(names, grads))
    norms["params"] = float(np.sqrt(sum(float((x * x).sum()) for x in grads)))
    lambdas = (cfg.lambda_grad, cfg.lambda_kld, cfg.lambda_seg)
    total = topo + lambdas[0] * grad + lambdas[1] * kld + lambdas[2] * seg
    return LossBreakdown(topo, grad, kld, seg, total, lambdas, norms, ties, param_grads)
