"""A small static-graph reverse-mode differentiation engine over float64 numpy arrays.

Graphs are built once with declared input shapes, then evaluated against
bindings any number of times::

    g = Graph()
    x = g.input("x", (3,))
    g.set_output(g.sum(g.abs(x)))
    g.evaluate({"x": np.array([1.0, -2.0, 3.0])})   # 6.0
    (dx,) = g.backward([x])                          # [1, -1, 1]

Broadcasting is limited to scalar operands of elementwise ops and the
row-wise ``bias_add`` / ``col_scale`` ops. At kinks (``abs`` and ``relu`` at
0, ties in ``min``/``max``) the subgradient is 0 or routed to the lowest
index.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Graph", "Node", "GradientReport", "evaluate", "backward", "finite_diff_check"]


class Node:
    __slots__ = ("graph", "id", "op", "inputs", "shape", "attrs", "name")

    def __init__(self, graph, op, inputs, shape, attrs=None, name=None):
        self.graph = graph
        self.id = len(graph.nodes)
        self.op = op
        self.inputs = tuple(inputs)
        self.shape = tuple(shape)
        self.attrs = attrs or {}
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.id} {self.op}{label} shape={self.shape}>"

    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, other)
        return self.graph.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.graph.div(self, other)

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


def _unbroadcast(g, shape):
    # only scalar broadcasting is permitted, so reducing to () is the one case
    return np.asarray(g.sum()) if shape == () and np.shape(g) != () else g


def _elementwise_shape(a, b, op):
    if a.shape == b.shape or b.shape == ():
        return a.shape
    if a.shape == ():
        return b.shape
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_shape(shape, axis):
    if axis is None:
        return ()
    axis = axis % len(shape)
    return shape[:axis] + shape[axis + 1:]


def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def minmax(x):
    """Min-max normalise a vector; a constant vector maps to zeros."""
    lo = x[np.argmin(x)]
    span = x[np.argmax(x)] - lo
    if span == 0:
        return np.zeros_like(x)
    return (x - lo) / span


def _log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# forward: (values, attrs) -> array
# backward: (upstream, values, out, attrs) -> tuple of input gradients
_FORWARD = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "div": lambda v, a: v[0] / v[1],
    "scale": lambda v, a: v[0] * a["c"],
    "bias_add": lambda v, a: v[0] + v[1],
    "col_scale": lambda v, a: v[0] * v[1],
    "matmul": lambda v, a: v[0] @ v[1],
    "abs": lambda v, a: np.abs(v[0]),
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "exp": lambda v, a: np.exp(v[0]),
    "log": lambda v, a: np.log(v[0]),
    "square": lambda v, a: v[0] * v[0],
    "sum": lambda v, a: np.asarray(v[0].sum(axis=a["axis"])),
    "mean": lambda v, a: np.asarray(v[0].mean(axis=a["axis"])),
    "max": lambda v, a: np.asarray(v[0].reshape(-1)[np.argmax(v[0])]),
    "min": lambda v, a: np.asarray(v[0].reshape(-1)[np.argmin(v[0])]),
    "softmax": lambda v, a: np.exp(_log_softmax(v[0])),
    "log_softmax": lambda v, a: _log_softmax(v[0]),
    "gather": lambda v, a: v[0][a["index"]],
    "minmax": lambda v, a: minmax(v[0]),
}


def _bw_minmax(fn):
    def bw(g, v, out, a):
        x = v[0]
        grad = np.zeros(x.size)
        grad[fn(x)] = g
        return (grad.reshape(x.shape),)
    return bw


def _bw_minmax_norm(g, v, out, a):
    # y = (x - x[lo]) / (x[hi] - x[lo]); zero gradient for a constant vector
    x = v[0]
    lo, hi = np.argmin(x), np.argmax(x)
    span = x[hi] - x[lo]
    if span == 0:
        return (np.zeros_like(x),)
    grad = g / span
    grad[lo] += np.dot(g, out - 1.0) / span
    grad[hi] -= np.dot(g, out) / span
    return (grad,)


def _bw_gather(g, v, out, a):
    x = v[0]
    grad = np.zeros_like(x)
    idx = a["index"].reshape(-1)
    np.add.at(grad, idx, g.reshape((idx.size,) + x.shape[1:]))
    return (grad,)


_BACKWARD = {
    "add": lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
    "sub": lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
    "mul": lambda g, v, o, a: (_unbroadcast(g * v[1], v[0].shape),
                               _unbroadcast(g * v[0], v[1].shape)),
    "div": lambda g, v, o, a: (_unbroadcast(g / v[1], v[0].shape),
                               _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape)),
    "scale": lambda g, v, o, a: (g * a["c"],),
    "bias_add": lambda g, v, o, a: (g, g.sum(axis=0)),
    "col_scale": lambda g, v, o, a: (g * v[1], (g * v[0]).sum(axis=0)),
    "matmul": lambda g, v, o, a: (g @ v[1].T, v[0].T @ g),
    "abs": lambda g, v, o, a: (g * np.sign(v[0]),),
    "relu": lambda g, v, o, a: (g * (v[0] > 0),),
    "exp": lambda g, v, o, a: (g * o,),
    "log": lambda g, v, o, a: (g / v[0],),
    "square": lambda g, v, o, a: (2.0 * g * v[0],),
    "sum": lambda g, v, o, a: (np.array(_expand(g, v[0].shape, a["axis"])),),
    "mean": lambda g, v, o, a: (np.array(_expand(g, v[0].shape, a["axis"]))
                                * (o.size / v[0].size),),
    "max": _bw_minmax(np.argmax),
    "min": _bw_minmax(np.argmin),
    "softmax": lambda g, v, o, a: (o * (g - (g * o).sum(axis=-1, keepdims=True)),),
    "log_softmax": lambda g, v, o, a: (g - np.exp(o) * g.sum(axis=-1, keepdims=True),),
    "gather": _bw_gather,
    "minmax": _bw_minmax_norm,
}

# ops whose local derivative is piecewise; used to flag finite-difference kinks
_KINKED = {"abs", "relu", "max", "min", "minmax"}


class Graph:
    """Static computation graph; see the module docstring for usage."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.params: dict[str, Node] = {}
        self.output: Node | None = None
        self.values: dict[int, np.ndarray] = {}
        self._bindings: dict[str, np.ndarray] = {}
        self._evaluated = False
        self.generation = 0

    # -- construction -------------------------------------------------------

    def _add(self, op, inputs, shape, attrs=None, name=None):
        for n in inputs:
            if n.graph is not self:
                raise ValueError("node belongs to another graph")
        node = Node(self, op, inputs, shape, attrs, name)
        self.nodes.append(node)
        self._evaluated = False
        return node

    def _leaf(self, kind, name, shape):
        if name in self.inputs:
            raise ValueError(f"duplicate input name {name!r}")
        node = self._add(kind, (), shape, name=name)
        self.inputs[name] = node
        return node

    def input(self, name, shape=()):
        return self._leaf("input", name, shape)

    def param(self, name, shape):
        node = self._leaf("param", name, shape)
        self.params[name] = node
        return node

    def const(self, value, name=None):
        value = np.asarray(value, dtype=np.float64)
        return self._add("const", (), value.shape, {"value": value}, name)

    def _lift(self, x):
        return x if isinstance(x, Node) else self.const(x)

    def add(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._add("add", (a, b), _elementwise_shape(a, b, "add"))

    def sub(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._add("sub", (a, b), _elementwise_shape(a, b, "sub"))

    def mul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._add("mul", (a, b), _elementwise_shape(a, b, "mul"))

    def div(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._add("div", (a, b), _elementwise_shape(a, b, "div"))

    def scale(self, x, c):
        return self._add("scale", (x,), x.shape, {"c": float(c)})

    def bias_add(self, x, b):
        if len(x.shape) != 2 or b.shape != x.shape[1:]:
            raise ValueError(f"bias_add: cannot add {b.shape} to rows of {x.shape}")
        return self._add("bias_add", (x, b), x.shape)

    def col_scale(self, x, w):
        """Multiply column ``k`` of an N x C matrix by ``w[k]``."""
        w = self._lift(w)
        if len(x.shape) != 2 or w.shape != x.shape[1:]:
            raise ValueError(f"col_scale: cannot scale {x.shape} columns by {w.shape}")
        return self._add("col_scale", (x, w), x.shape)

    def matmul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return self._add("matmul", (a, b), (a.shape[0], b.shape[1]))

    def _unary(self, op, x):
        return self._add(op, (x,), x.shape)

    def abs(self, x):
        return self._unary("abs", x)

    def relu(self, x):
        return self._unary("relu", x)

    def exp(self, x):
        return self._unary("exp", x)

    def log(self, x):
        return self._unary("log", x)

    def square(self, x):
        return self._unary("square", x)

    def sum(self, x, axis=None):
        return self._add("sum", (x,), _reduce_shape(x.shape, axis), {"axis": axis})

    def mean(self, x, axis=None):
        return self._add("mean", (x,), _reduce_shape(x.shape, axis), {"axis": axis})

    def max(self, x):
        return self._add("max", (x,), ())

    def min(self, x):
        return self._add("min", (x,), ())

    def dot(self, x, y):
        return self.sum(self.mul(x, y))

    def softmax(self, x):
        return self._unary("softmax", x)

    def log_softmax(self, x):
        return self._unary("log_softmax", x)

    def gather(self, x, index):
        """Rows of ``x`` picked by an integer array; output shape ``index.shape + x.shape[1:]``."""
        index = np.asarray(index, dtype=np.intp)
        if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
            raise ValueError("gather index out of range")
        return self._add("gather", (x,), index.shape + x.shape[1:], {"index": index})

    def minmax_normalize(self, x):
        """``(x - min x) / (max x - min x)`` on a vector; zeros when ``x`` is constant."""
        if len(x.shape) != 1:
            raise ValueError(f"minmax_normalize expects a vector, got shape {x.shape}")
        return self._unary("minmax", x)

    def set_output(self, node):
        if node.shape != ():
            raise ValueError(f"output must be a scalar, got shape {node.shape}")
        self.output = node
        return node

    # -- execution ----------------------------------------------------------

    def __getitem__(self, node):
        return self.values[node.id]

    def _ancestors(self, targets):
        need = set()
        stack = [t.id for t in targets]
        while stack:
            i = stack.pop()
            if i in need:
                continue
            need.add(i)
            stack.extend(n.id for n in self.nodes[i].inputs)
        return need

    def evaluate(self, bindings, targets=None, reuse=False):
        """Run the forward pass; returns the output value (or the first target's).

        Intermediate values stay available as ``graph[node]``.

        With ``reuse=True`` previously computed values are kept and only new
        nodes are computed, which lets a caller bind inputs in stages.
        """
        if targets is None:
            if self.output is None:
                raise ValueError("graph has no output; pass targets or call set_output")
            targets = [self.output]
        if reuse:
            self._bindings.update(bindings)
        else:
            self.values = {}
            self._bindings = dict(bindings)
            self.generation += 1
        need = self._ancestors(targets)
        for node in self.nodes:
            if node.id not in need or node.id in self.values:
                continue
            if node.op in ("input", "param"):
                if node.name not in self._bindings:
                    raise KeyError(f"unbound input {node.name!r}")
                val = np.asarray(self._bindings[node.name], dtype=np.float64)
                if val.shape != node.shape:
                    raise ValueError(f"input {node.name!r}: expected shape {node.shape}, "
                                     f"got {val.shape}")
            elif node.op == "const":
                val = node.attrs["value"]
            else:
                val = _FORWARD[node.op]([self.values[n.id] for n in node.inputs], node.attrs)
            self.values[node.id] = val
        self._evaluated = True
        out = self.values[targets[0].id]
        return float(out) if out.shape == () else out

    def backward(self, wrt, output=None, extra=None, seed=1.0):
        """Reverse-mode gradients of ``output`` with respect to each node in ``wrt``.

        ``extra`` maps nodes to additional upstream gradients injected at those
        nodes, for loss terms whose gradient is computed outside the graph.
        """
        output = output or self.output
        if output is None or output.id not in self.values:
            raise RuntimeError("evaluate must run before backward")
        for n in wrt:
            if not isinstance(n, Node) or n.graph is not self:
                raise ValueError(f"{n!r} is not a node of this graph")
        grads = {output.id: np.asarray(seed, dtype=np.float64)}
        for node, g in (extra or {}).items():
            if node.id not in self.values:
                raise RuntimeError(f"{node!r} was not evaluated")
            grads[node.id] = grads.get(node.id, 0.0) + np.asarray(g, dtype=np.float64)
        top = max(grads)
        for node in reversed(self.nodes[: top + 1]):
            g = grads.get(node.id)
            if g is None or not node.inputs:
                continue
            vals = [self.values[n.id] for n in node.inputs]
            parts = _BACKWARD[node.op](g, vals, self.values[node.id], node.attrs)
            for parent, pg in zip(node.inputs, parts):
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        return [np.broadcast_to(grads.get(n.id, 0.0), n.shape).astype(np.float64)
                for n in wrt]

    def kink_signature(self, output=None):
        """Branch choices of every piecewise op feeding ``output`` at the current values."""
        output = output or self.output
        need = self._ancestors([output])
        sig = []
        for node in self.nodes:
            if node.id not in need or node.op not in _KINKED:
                continue
            x = self.values[node.inputs[0].id]
            if node.op in ("abs", "relu"):
                sig.append(np.sign(x).tobytes())
            else:
                ranked = np.sort(x.reshape(-1))
                lo_tie = ranked.size > 1 and ranked[0] == ranked[1]
                hi_tie = ranked.size > 1 and ranked[-1] == ranked[-2]
                sig.append((int(np.argmin(x)), int(np.argmax(x)), bool(lo_tie), bool(hi_tie)))
        return sig


def evaluate(graph: Graph, bindings, targets=None) -> float:
    return graph.evaluate(bindings, targets)


def backward(graph: Graph, wrt, output=None):
    return graph.backward(wrt, output)


@dataclass
class GradientReport:
    analytic: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict)
    max_rel_error: float = 0.0
    n_checked: int = 0
    skipped: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "max_rel_error": self.max_rel_error,
            "n_checked": self.n_checked,
            "n_skipped": sum(len(v) for v in self.skipped.values()),
            "analytic": {k: np.asarray(v).tolist() for k, v in self.analytic.items()},
            "numeric": {k: np.asarray(v).tolist() for k, v in self.numeric.items()},
        }


def rel_error(a, f, eps=1e-12):
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), eps)


def finite_diff_check(graph: Graph, bindings, wrt, h=1e-5, output=None, max_coords=1000,
                      seed=0) -> GradientReport:
    """Compare analytic gradients with central differences for the named inputs.

    Coordinates where a perturbation changes the branch of an ``abs``,
    ``relu``, ``min`` or ``max`` (or sits exactly on its kink) are recorded in
    ``skipped`` and left out of ``max_rel_error``. Inputs with more than
    ``max_coords`` entries are checked on a seeded random subset.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    output = output or graph.output
    bindings = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    names = [wrt] if isinstance(wrt, str) else list(wrt)
    for name in names:
        if name not in graph.inputs:
            raise KeyError(f"{name!r} is not an input of the graph")
    graph.evaluate(bindings, [output])
    base_sig = graph.kink_signature(output)
    analytic = graph.backward([graph.inputs[n] for n in names], output)
    rng = np.random.default_rng(seed)
    report = GradientReport()
    for name, ga in zip(names, analytic):
        x = bindings[name]
        coords = np.arange(x.size)
        if x.size > max_coords:
            coords = np.sort(rng.choice(x.size, max_coords, replace=False))
        num = np.full(x.size, np.nan)
        skipped = []
        flat = x.reshape(-1)
        for c in coords:
            orig = flat[c]
            vals, kinked = [], False
            for step in (h, -h):
                flat[c] = orig + step
                vals.append(graph.evaluate(bindings, [output]))
                kinked |= graph.kink_signature(output) != base_sig
            flat[c] = orig
            num[c] = (vals[0] - vals[1]) / (2 * h)
            # a kink at the base point shows up as sign 0 turning into +-1
            if kinked:
                skipped.append(int(c))
        report.analytic[name] = ga
        report.numeric[name] = num.reshape(x.shape)
        report.skipped[name] = skipped
        ok = np.setdiff1d(coords, skipped)
        if ok.size:
            err = rel_error(ga.reshape(-1)[ok], num[ok])
            report.max_rel_error = max(report.max_rel_error, float(err.max()))
            report.n_checked += int(ok.size)
    graph.evaluate(bindings, [output])
    return report
