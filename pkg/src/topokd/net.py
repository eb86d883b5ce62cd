"""Per-point segmentation networks with k-nearest-neighbour mean aggregation.

Each layer maps features ``h`` to ``relu(h @ W_self + mean_kNN(h) @ W_nbr + b)``.
A stage is a run of such layers; the output of a stage's last layer is that
stage's feature map. A linear head turns the last feature map into logits.
The architecture is a per-point function of the point and its (symmetric)
neighbourhood, so permuting the input permutes every output row alike.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Graph
from .pointcloud import PointCloud

__all__ = [
    "NetworkConfig",
    "Network",
    "ForwardTrace",
    "init_network",
    "forward",
    "task_loss",
    "activation_gradients",
    "knn_indices",
    "stage_pairing",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class NetworkConfig:
    depths: tuple = (1, 1, 1, 1, 1)
    channels: tuple = (4, 4, 8, 16, 32)
    k: int = 8
    n_classes: int = 4
    seed: int = 0
    in_features: int = 3

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.depths) != len(self.channels) or not self.depths:
            raise ValueError("depths and channels must be non-empty and of equal length")
        if any(d < 1 for d in self.depths) or any(c < 1 for c in self.channels):
            raise ValueError("stage depths and channels must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_classes < 1 or self.in_features < 1:
            raise ValueError("n_classes and in_features must be positive")

    @classmethod
    def teacher(cls, **kw):
        kw.setdefault("depths", (1, 1, 1, 2, 1))
        kw.setdefault("channels", (8, 16, 32, 64, 128))
        return cls(**kw)

    @classmethod
    def student(cls, **kw):
        kw.setdefault("depths", (1, 1, 1, 1, 1))
        kw.setdefault("channels", (4, 4, 8, 16, 32))
        return cls(**kw)

    @property
    def n_stages(self):
        return len(self.depths)

    def layer_shapes(self):
        """(name, shape) of every parameter in declaration order."""
        shapes = []
        c_in = self.in_features
        for s, (depth, c) in enumerate(zip(self.depths, self.channels)):
            for layer in range(depth):
                p = f"s{s}.l{layer}"
                shapes += [(f"{p}.w_self", (c_in, c)), (f"{p}.w_nbr", (c_in, c)), (f"{p}.b", (c,))]
                c_in = c
        shapes += [("head.w", (c_in, self.n_classes)), ("head.b", (self.n_classes,))]
        return shapes

    def n_params(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.layer_shapes()))

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def knn_indices(coords, k):
    """Indices of the ``k`` nearest other points per row, nearest first (ties by index)."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = (diff * diff).sum(-1)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def stage_pairing(n_student, n_teacher):
    """Student stage i pairs with teacher stage round(i * L_T / L_S), rounding halves up."""
    return [min(int(np.floor(i * n_teacher / n_student + 0.5)), n_teacher - 1)
            for i in range(n_student)]


@dataclass
class ForwardTrace:
    """Forward pass of one network on one cloud, with its graph kept for backward."""

    graph: Graph
    stage_nodes: list
    logits_node: object
    features: list = field(default_factory=list)
    logits: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    coords_node: object = None
    loss_node: object = None
    cache: dict = field(default_factory=dict)
    _stamp: int = 0

    @property
    def n_points(self):
        return self.logits_node.shape[0]

    def refresh(self):
        """Copy current graph values into ``features``/``logits``."""
        self.features = [self.graph[n] for n in self.stage_nodes]
        self.logits = self.graph[self.logits_node]
        self._stamp = self.graph.generation


class Network:
    def __init__(self, cfg: NetworkConfig, params=None):
        self.cfg = cfg
        if params is None:
            params = _init_params(cfg)
        shapes = dict(cfg.layer_shapes())
        if set(params) != set(shapes):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if np.shape(params[name]) != shape:
                raise ValueError(f"parameter {name}: shape {np.shape(params[name])} != {shape}")
        self.params = {name: np.array(params[name], dtype=np.float64) for name, _ in
                       cfg.layer_shapes()}

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        return Network(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].reshape(-1) for n, _ in self.cfg.layer_shapes()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        off = 0
        for name, shape in self.cfg.layer_shapes():
            size = int(np.prod(shape))
            self.params[name] = flat[off: off + size].reshape(shape).copy()
            off += size
        if off != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    def input_features(self, cloud: PointCloud) -> np.ndarray:
        return cloud.coords[:, : self.cfg.in_features]

    def build(self, cloud: PointCloud, labels=None) -> ForwardTrace:
        """Build (but do not evaluate) the forward graph for ``cloud``."""
        n = len(cloud)
        k = self.cfg.k
        if n - 1 < k:
            warnings.warn(f"cloud has {n} points; clamping k from {k} to {max(n - 1, 0)}")
            k = n - 1
        g = Graph()
        h = g.input("x", (n, self.cfg.in_features))
        idx = knn_indices(cloud.coords, k) if k > 0 else None
        stage_nodes = []
        c_in = self.cfg.in_features
        for s, (depth, c) in enumerate(zip(self.cfg.depths, self.cfg.channels)):
            for layer in range(depth):
                p = f"s{s}.l{layer}"
                w_self = g.param(f"{p}.w_self", (c_in, c))
                w_nbr = g.param(f"{p}.w_nbr", (c_in, c))
                b = g.param(f"{p}.b", (c,))
                nbr = g.mean(g.gather(h, idx), axis=1) if idx is not None else h
                h = g.relu(g.bias_add(g.matmul(h, w_self) + g.matmul(nbr, w_nbr), b))
                c_in = c
            stage_nodes.append(h)
        logits = g.bias_add(g.matmul(h, g.param("head.w", (c_in, self.cfg.n_classes))),
                            g.param("head.b", (self.cfg.n_classes,)))
        trace = ForwardTrace(g, stage_nodes, logits, coords_node=g.inputs["x"])
        trace.cache["x"] = self.input_features(cloud)
        if labels is not None:
            trace.loss_node = cross_entropy_node(g, logits, labels, self.cfg.n_classes)
        return trace

    def bindings(self, trace: ForwardTrace):
        return {"x": trace.cache["x"], **self.params}

    def run(self, trace: ForwardTrace, targets=None) -> ForwardTrace:
        targets = targets or [trace.logits_node]
        trace.graph.evaluate(self.bindings(trace), targets)
        trace.params = self.params
        trace.refresh()
        return trace

    def predict(self, cloud: PointCloud) -> np.ndarray:
        return forward(self, cloud).logits.argmax(axis=1)


def _init_params(cfg: NetworkConfig):
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in cfg.layer_shapes():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            # two summed branches per layer, so halve the He variance
            fan_in = shape[0] * (1 if name.startswith("head") else 2)
            params[name] = rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)
    return params


def init_network(cfg: NetworkConfig) -> Network:
    return Network(cfg)


def cross_entropy_node(g: Graph, logits, labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = logits.shape[0]
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} points")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels] = 1.0
    return g.scale(g.sum(g.mul(g.log_softmax(logits), g.const(onehot))), -1.0 / n)


def forward(net: Network, cloud: PointCloud) -> ForwardTrace:
    if len(cloud) < 1:
        raise ValueError("cloud is empty")
    return net.run(net.build(cloud))


def task_loss(trace: ForwardTrace, labels, net: Network | None = None) -> float:
    """Mean per-point cross-entropy; adds the loss node to the trace's graph."""
    g = trace.graph
    if trace.loss_node is None:
        trace.loss_node = cross_entropy_node(g, trace.logits_node, labels,
                                             trace.logits_node.shape[1])
    return g.evaluate({}, [trace.loss_node], reuse=True)


def activation_gradients(trace: ForwardTrace, loss_node=None, scale=1.0):
    """d(loss)/d(F^l) for every stage feature map of the trace."""
    if trace._stamp != trace.graph.generation:
        raise RuntimeError("trace is stale: its graph was re-evaluated since this forward pass")
    loss_node = loss_node or trace.loss_node
    if loss_node is None:
        raise ValueError("trace has no loss; call task_loss first")
    if loss_node.id not in trace.graph.values:
        trace.graph.evaluate({}, [loss_node], reuse=True)
    return trace.graph.backward(trace.stage_nodes, loss_node, seed=scale)


# Checkpoint layout (little-endian):
#   b"TKDN" | u32 version (1) | u32 config byte length | u64 parameter count
#   config as UTF-8 JSON | float64 parameters in declaration order
_CKPT = struct.Struct("<4sIIQ")


def save_checkpoint(net: Network, path, extra=None):
    meta = {"config": net.cfg.to_dict(), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    flat = net.flat()
    with open(path, "wb") as fh:
        fh.write(_CKPT.pack(b"TKDN", 1, len(blob), flat.size))
        fh.write(blob)
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(network, extra)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, version, n_cfg, n_par = _CKPT.unpack_from(buf, 0)
    if magic != b"TKDN" or version != 1:
        raise ValueError(f"{path}: not a version-1 network checkpoint")
    off = _CKPT.size
    meta = json.loads(buf[off: off + n_cfg].decode())
    off += n_cfg
    flat = np.frombuffer(buf, "<f8", n_par, off)
    if off + 8 * n_par != len(buf):
        raise ValueError(f"{path}: truncated checkpoint")
    cfg = NetworkConfig.from_dict(meta["config"])
    net = Network(cfg, {n: np.zeros(s) for n, s in cfg.layer_shapes()})
    net.set_flat(flat)
    return net, meta.get("extra", {})
