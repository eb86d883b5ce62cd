"""Vietoris-Rips persistence by boundary-matrix reduction over Z/2.

Every diagram point keeps the simplices that created and destroyed it, plus
the *critical edge* whose length equals the birth or death value. Gradients of
diagram coordinates with respect to the input points flow through those
edges (see :mod:`topokd.kd`).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Filtration",
    "PersistenceDiagram",
    "SnapshotProfile",
    "pairwise_distances",
    "build_filtration",
    "reduce",
    "persistence",
    "h0_unionfind",
    "snapshot_betti",
    "subsample_for_tda",
    "default_threshold",
]

MAX_DIM = 2


def pairwise_distances(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def default_threshold(points, dist=None) -> float:
    """Point-set diameter times 1.05 (positive even for a single point)."""
    if dist is None:
        dist = pairwise_distances(points)
    diam = float(dist.max()) if dist.size else 0.0
    return diam * 1.05 if diam > 0 else 1.0


@dataclass
class Filtration:
    simplices: list
    values: np.ndarray
    dims: np.ndarray
    threshold: float
    maxdim: int
    n_vertices: int

    def __len__(self):
        return len(self.simplices)

    def index(self):
        return {s: i for i, s in enumerate(self.simplices)}


def build_filtration(points, maxdim=1, threshold=None) -> Filtration:
    """All simplices up to dimension ``maxdim + 1`` whose diameter is <= ``threshold``.

    Order is by value, then dimension, then vertex tuple, so every face comes
    before its cofaces.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("points must be a non-empty m x d array")
    if maxdim not in (0, 1, 2):
        raise ValueError(f"maxdim must be 0, 1 or 2 (got {maxdim})")
    dist = pairwise_distances(points)
    if threshold is None:
        threshold = default_threshold(points, dist)
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    m = points.shape[0]
    blocks = [(np.arange(m)[:, None], np.zeros(m))]
    iu, ju = np.triu_indices(m, 1)
    keep = dist[iu, ju] <= threshold
    edges = np.column_stack([iu[keep], ju[keep]])
    blocks.append((edges, dist[edges[:, 0], edges[:, 1]]))
    if maxdim >= 1 and m >= 3:
        adj = dist <= threshold
        for size in range(3, maxdim + 3):
            if m < size:
                break
            combos = np.array(list(itertools.combinations(range(m), size)), dtype=np.int64)
            ok = np.ones(len(combos), dtype=bool)
            vals = np.zeros(len(combos))
            for a, b in itertools.combinations(range(size), 2):
                ok &= adj[combos[:, a], combos[:, b]]
                vals = np.maximum(vals, dist[combos[:, a], combos[:, b]])
            blocks.append((combos[ok], vals[ok]))
    simplices, values, dims, cols = [], [], [], []
    width = max(b[0].shape[1] for b in blocks)
    for verts, vals in blocks:
        d = verts.shape[1] - 1
        padded = np.full((len(verts), width), -1, dtype=np.int64)
        padded[:, : verts.shape[1]] = verts
        cols.append(padded)
        values.append(vals)
        dims.append(np.full(len(verts), d))
        simplices.extend(tuple(int(v) for v in row) for row in verts)
    values = np.concatenate(values)
    dims = np.concatenate(dims)
    padded = np.concatenate(cols)
    keys = [padded[:, c] for c in range(width - 1, -1, -1)] + [dims, values]
    order = np.lexsort(keys)
    return Filtration([simplices[i] for i in order], values[order], dims[order],
                      float(threshold), maxdim, m)


@dataclass
class PersistenceDiagram:
    """Multiset of (birth, death, dim) with critical-simplex provenance.

    ``birth_edge``/``death_edge`` hold the vertex pair whose distance equals
    the birth/death value (``None`` for vertex births and infinite deaths).
    """

    birth: np.ndarray
    death: np.ndarray
    dim: np.ndarray
    birth_simplex: list = field(default_factory=list)
    death_simplex: list = field(default_factory=list)
    birth_edge: list = field(default_factory=list)
    death_edge: list = field(default_factory=list)
    maxdim: int = 1

    def __len__(self):
        return len(self.birth)

    @classmethod
    def empty(cls, maxdim=1):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64), maxdim=maxdim)

    def select(self, dim=None, finite=True, drop_zero=True) -> np.ndarray:
        """Indices of points in ``dim`` (all dims if None), optionally finite / non-trivial."""
        keep = np.ones(len(self), dtype=bool)
        if dim is not None:
            keep &= self.dim == dim
        if finite:
            keep &= np.isfinite(self.death)
        if drop_zero:
            keep &= self.death > self.birth
        return np.flatnonzero(keep)

    def points(self, dim=None, finite=True, drop_zero=True) -> np.ndarray:
        idx = self.select(dim, finite, drop_zero)
        return np.column_stack([self.birth[idx], self.death[idx]])

    def n_infinite(self, dim=0) -> int:
        return int(np.sum((self.dim == dim) & np.isinf(self.death)))

    def sorted_pairs(self, dim=None):
        idx = self.select(dim, finite=False, drop_zero=False)
        return sorted(zip(self.dim[idx].tolist(), self.birth[idx].tolist(),
                          self.death[idx].tolist()))

    def to_text(self) -> str:
        def fmt(s):
            return ",".join(map(str, s)) if s is not None else "-"

        lines = []
        for i in range(len(self)):
            death = "inf" if np.isinf(self.death[i]) else repr(float(self.death[i]))
            bs = self.birth_simplex[i] if self.birth_simplex else None
            ds = self.death_simplex[i] if self.death_simplex else None
            lines.append(f"{int(self.dim[i])} {float(self.birth[i])!r} {death} {fmt(bs)} {fmt(ds)}")
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text, maxdim=1):
        def parse(tok):
            return None if tok == "-" else tuple(int(v) for v in tok.split(","))

        dims, births, deaths, bss, dss = [], [], [], [], []
        for line in text.splitlines():
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            dims.append(int(parts[0]))
            births.append(float(parts[1]))
            deaths.append(math.inf if parts[2] == "inf" else float(parts[2]))
            bss.append(parse(parts[3]) if len(parts) > 3 else None)
            dss.append(parse(parts[4]) if len(parts) > 4 else None)
        return cls(np.array(births, dtype=np.float64), np.array(deaths, dtype=np.float64),
                   np.array(dims, dtype=np.int64), bss, dss, [], [], maxdim)


def _boundary(simplex, index):
    if len(simplex) == 1:
        return []
    return [index[simplex[:i] + simplex[i + 1:]] for i in range(len(simplex))]


def _critical_edge(simplex, index):
    if len(simplex) < 2:
        return None
    if len(simplex) == 2:
        return simplex
    return max(itertools.combinations(simplex, 2), key=index.__getitem__)


def reduce(filt: Filtration) -> PersistenceDiagram:
    """Standard column reduction (with clearing) of the Z/2 boundary matrix.

    Zero-persistence pairs are kept; use ``PersistenceDiagram.select`` with
    ``drop_zero`` to filter them.
    """
    index = filt.index()
    n = len(filt)
    dims = filt.dims
    pivot_col = {}
    paired_row = set()
    pairs = []
    # higher dimensions first so their pivots can clear lower-dimensional columns
    for d in range(filt.maxdim + 1, 0, -1):
        for j in np.flatnonzero(dims == d):
            j = int(j)
            if j in paired_row:
                continue
            col = set(_boundary(filt.simplices[j], index))
            while col:
                low = max(col)
                k = pivot_col.get(low)
                if k is None:
                    pivot_col[low] = col
                    paired_row.add(low)
                    pairs.append((low, j))
                    break
                col ^= k
    births, deaths, pdims, bs, ds, be, de = [], [], [], [], [], [], []

    def emit(b, d):
        sb = filt.simplices[b]
        births.append(float(filt.values[b]))
        deaths.append(math.inf if d is None else float(filt.values[d]))
        pdims.append(len(sb) - 1)
        bs.append(sb)
        be.append(_critical_edge(sb, index))
        if d is None:
            ds.append(None)
            de.append(None)
        else:
            sd = filt.simplices[d]
            ds.append(sd)
            de.append(_critical_edge(sd, index))

    pairs.sort()
    death_of = dict(pairs)
    negative = set(death_of.values())
    for i in range(n):
        if dims[i] > filt.maxdim or i in negative:
            continue
        emit(i, death_of.get(i))
    return PersistenceDiagram(np.array(births), np.array(deaths), np.array(pdims, dtype=np.int64),
                              bs, ds, be, de, filt.maxdim)


def persistence(points, maxdim=1, threshold=None) -> PersistenceDiagram:
    """Diagram of the Rips filtration of ``points``.

    ``maxdim=0`` takes the union-find route, which yields the same diagram as
    :func:`reduce` (enforced by the test suite) in O(m^2 log m).
    """
    if maxdim == 0:
        return h0_unionfind(points, threshold)
    return reduce(build_filtration(points, maxdim, threshold))


class _DisjointSet:
    """Union-find that also tracks the oldest (lowest-index) vertex per component."""

    def __init__(self, n):
        self.parent = list(range(n))
        self.rank = [0] * n
        self.oldest = list(range(n))

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, ra, rb):
        """Merge two roots; returns the oldest vertex of the component that dies."""
        young = max(self.oldest[ra], self.oldest[rb])
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        self.oldest[ra] = min(self.oldest[ra], self.oldest[rb])
        return young


def _spanning_forest(dist, threshold):
    """Minimum spanning forest under the strict edge order (length, i, j).

    With a strict total order the forest is unique, so Kruskal over all edges
    accepts exactly these edges. Prim finds them with O(m) vectorised work
    per vertex.
    """
    m = dist.shape[0]
    inside = np.zeros(m, dtype=bool)
    best = np.full(m, np.inf)
    src = np.full(m, -1, dtype=np.int64)
    ar = np.arange(m)
    iu, ju, lengths = [], [], []
    for _ in range(m):
        out = np.flatnonzero(~inside & np.isfinite(best))
        if out.size == 0:
            v = int(np.flatnonzero(~inside)[0])  # start a new tree at the lowest free vertex
        else:
            lo = np.minimum(src[out], out)
            hi = np.maximum(src[out], out)
            v = int(out[np.lexsort((hi, lo, best[out]))[0]])
            a, b = sorted((int(src[v]), v))
            iu.append(a)
            ju.append(b)
            lengths.append(best[v])
        inside[v] = True
        d = dist[v]
        cand_lo, cand_hi = np.minimum(ar, v), np.maximum(ar, v)
        cur_lo, cur_hi = np.minimum(ar, src), np.maximum(ar, src)
        better = (d < best) | ((d == best) & ((cand_lo < cur_lo) |
                                              ((cand_lo == cur_lo) & (cand_hi < cur_hi))))
        better &= ~inside & (d <= threshold)
        best[better] = d[better]
        src[better] = v
    return np.array(iu, dtype=np.int64), np.array(ju, dtype=np.int64), np.array(lengths)


def h0_unionfind(points, threshold=None) -> PersistenceDiagram:
    """0-dimensional diagram from the single-linkage merge tree (Kruskal order).

    Applies the elder rule: at each merge the component with the younger
    oldest vertex dies, so provenance matches :func:`reduce`.
    """
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    dist = pairwise_distances(points)
    if threshold is None:
        threshold = default_threshold(points, dist)
    iu, ju, lengths = _spanning_forest(dist, threshold)
    order = np.lexsort((ju, iu, lengths))
    uf = _DisjointSet(m)
    deaths, born, killed = [], [], []
    alive = m
    for e in order:
        if alive == 1:
            break
        a, b = int(iu[e]), int(ju[e])
        ra, rb = uf.find(a), uf.find(b)
        if ra == rb:
            continue
        born.append((uf.union(ra, rb),))
        deaths.append(float(lengths[e]))
        killed.append((a, b))
        alive -= 1
    for r in sorted({uf.find(i) for i in range(m)}, key=lambda r: uf.oldest[r]):
        born.append((uf.oldest[r],))
        deaths.append(math.inf)
        killed.append(None)
    n = len(deaths)
    return PersistenceDiagram(np.zeros(n), np.array(deaths), np.zeros(n, dtype=np.int64),
                              born, list(killed), [None] * n, list(killed), 0)


@dataclass
class SnapshotProfile:
    scales: np.ndarray
    betti: np.ndarray  # len(scales) x (maxdim + 1)

    def to_dict(self):
        return {"scales": self.scales.tolist(), "betti": self.betti.tolist()}


def snapshot_betti(points, scales, maxdim=1) -> SnapshotProfile:
    """Betti numbers of the Rips complex frozen at each scale in ``scales``."""
    scales = np.asarray(scales, dtype=np.float64).reshape(-1)
    if scales.size == 0:
        raise ValueError("scale list is empty")
    if np.any(np.diff(scales) <= 0):
        raise ValueError("scales must be strictly increasing")
    betti = np.zeros((scales.size, maxdim + 1), dtype=np.int64)
    for s, eps in enumerate(scales):
        # the complex at a non-positive scale is just the vertices
        filt = build_filtration(points, maxdim, max(float(eps), np.finfo(float).tiny))
        dgm = reduce(filt)
        for d in range(maxdim + 1):
            betti[s, d] = dgm.n_infinite(d)
    return SnapshotProfile(scales, betti)


def subsample_for_tda(features, m, seed=0):
    """Seeded uniform sample of ``m`` rows without replacement; indices ascending."""
    features = np.asarray(features)
    n = features.shape[0]
    if m > n:
        raise ValueError(f"cannot subsample {m} rows from {n}")
    idx = np.sort(np.random.default_rng(seed).choice(n, m, replace=False))
    return features[idx], idx
