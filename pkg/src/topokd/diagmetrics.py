"""Distances between persistence diagrams.

Diagrams are compared one homology dimension at a time and the per-dimension
values summed. Infinite bars and zero-persistence pairs never take part.
Functions accept either :class:`~topokd.tda.PersistenceDiagram` objects or
plain ``k x 2`` arrays of (birth, death) rows, which are treated as a single
dimension.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .tda import PersistenceDiagram

__all__ = [
    "Matching",
    "BoundReport",
    "chamfer",
    "chamfer_arrays",
    "chamfer_grad",
    "diagonal_sq",
    "linear_sum_assignment",
    "wasserstein2_exact",
    "bound_check",
    "W2_SIZE_LIMIT",
]

log = logging.getLogger(__name__)

W2_SIZE_LIMIT = 64


def _by_dim(dgm):
    if isinstance(dgm, PersistenceDiagram):
        return {d: dgm.points(d) for d in range(dgm.maxdim + 1)}
    pts = np.asarray(dgm, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ValueError("diagram arrays must hold finite points only")
    return {0: pts}


def diagonal_sq(pts):
    """Squared Euclidean distance from each (birth, death) row to the diagonal."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    gap = pts[:, 1] - pts[:, 0]
    return 0.5 * (gap * gap)


def chamfer_arrays(a, b):
    """Chamfer distance between two point sets in the (birth, death) plane.

    Returns ``(value, nn_ab, nn_ba)`` where ``nn_ab[i]`` is the index in ``b``
    nearest to ``a[i]`` (lowest index on ties). When one side is empty the
    other side's points are charged their squared distance to the diagonal and
    their neighbour index is ``-1``.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        value = math.fsum(np.concatenate([diagonal_sq(a), diagonal_sq(b)]))
        return value, np.full(len(a), -1), np.full(len(b), -1)
    diff = a[:, None, :] - b[None, :, :]
    sq = (diff * diff).sum(-1)
    nn_ab = sq.argmin(axis=1)
    nn_ba = sq.argmin(axis=0)
    # correctly rounded, so the value does not depend on summation order
    value = math.fsum(np.concatenate([sq[np.arange(len(a)), nn_ab], sq[nn_ba, np.arange(len(b))]]))
    return value, nn_ab, nn_ba


def chamfer_grad(a, b):
    """Gradient of ``chamfer_arrays(a, b)`` with respect to the rows of ``b``.

    Each nearest-neighbour assignment is held fixed (a subgradient at ties).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    grad = np.zeros_like(b)
    if len(b) == 0:
        return grad
    if len(a) == 0:
        gap = b[:, 1] - b[:, 0]
        grad[:, 0] = -gap
        grad[:, 1] = gap
        return grad
    _, nn_ab, nn_ba = chamfer_arrays(a, b)
    grad += 2.0 * (b - a[nn_ba])
    np.add.at(grad, nn_ab, 2.0 * (b[nn_ab] - a))
    return grad


def chamfer(d1, d2) -> float:
    """Symmetric squared-distance Chamfer sum, per homology dimension."""
    p1, p2 = _by_dim(d1), _by_dim(d2)
    terms = []
    for dim in sorted(set(p1) | set(p2)):
        a = p1.get(dim, np.zeros((0, 2)))
        b = p2.get(dim, np.zeros((0, 2)))
        terms.append(chamfer_arrays(a, b)[0])
    return math.fsum(terms)


def linear_sum_assignment(cost):
    """Minimum-cost perfect assignment on a square matrix.

    Shortest augmenting path with dual potentials, O(n^3). Returns
    ``col_of_row`` as an integer array.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.int64)  # row_of[j]: 1-based row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            cols = np.flatnonzero(free) + 1
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[row_of[1:] - 1] = np.arange(n)
    return col_of_row


@dataclass
class Matching:
    """Optimal partial matching; ``-1`` on either side stands for the diagonal."""

    pairs: list
    cost: float

    def to_dict(self):
        return {"pairs": [list(p) for p in self.pairs], "cost": self.cost}


def _w2_single(a, b):
    n1, n2 = len(a), len(b)
    if n1 + n2 == 0:
        return 0.0, []
    da, db = diagonal_sq(a), diagonal_sq(b)
    n = n1 + n2
    finite = [da.sum() + db.sum()]
    cross = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1) if n1 and n2 else np.zeros((n1, n2))
    if cross.size:
        finite.append(cross.max() * min(n1, n2))
    big = 4.0 * (sum(finite) + 1.0)
    # rows: points of a, then diagonal slots for b; columns: points of b, then diagonal slots for a
    c = np.zeros((n, n))
    c[:n1, :n2] = cross
    c[:n1, n2:] = big
    c[:n1, n2:][np.arange(n1), np.arange(n1)] = da
    c[n1:, :n2] = big
    c[n1:, :n2][np.arange(n2), np.arange(n2)] = db
    col = linear_sum_assignment(c)
    pairs = []
    for i, j in enumerate(col):
        if i < n1 and j < n2:
            pairs.append((i, int(j)))
        elif i < n1:
            pairs.append((i, -1))
        elif j < n2:
            pairs.append((-1, int(j)))
    total = 0.0
    for i, j in pairs:
        if i >= 0 and j >= 0:
            total += float(cross[i, j])
        elif i >= 0:
            total += float(da[i])
        else:
            total += float(db[j])
    return total, pairs


def wasserstein2_exact(d1, d2):
    """Exact 2-Wasserstein distance with diagonal augmentation.

    Returns ``(distance, {dim: Matching})``. Raises ``ValueError`` when the
    combined number of finite points exceeds ``W2_SIZE_LIMIT``; this solver is
    meant as an oracle, not for use inside training loops.
    """
    p1, p2 = _by_dim(d1), _by_dim(d2)
    size = sum(len(v) for v in p1.values()) + sum(len(v) for v in p2.values())
    if size > W2_SIZE_LIMIT:
        raise ValueError(f"diagrams too large for the exact solver ({size} > {W2_SIZE_LIMIT})")
    total = 0.0
    matchings = {}
    for dim in sorted(set(p1) | set(p2)):
        a = p1.get(dim, np.zeros((0, 2)))
        b = p2.get(dim, np.zeros((0, 2)))
        cost, pairs = _w2_single(a, b)
        total += cost
        matchings[dim] = Matching(pairs, cost)
    return math.sqrt(total), matchings


@dataclass
class BoundReport:
    chamfer: float
    w2: float
    satisfied: bool
    gap: float

    def to_dict(self):
        return {"chamfer": self.chamfer, "w2": self.w2, "satisfied": self.satisfied,
                "gap": self.gap}


def bound_check(d1, d2, tol=1e-12) -> BoundReport:
    """Test ``W2 <= sqrt(chamfer)`` for one pair; violations are logged, never raised."""
    cd = chamfer(d1, d2)
    w2, _ = wasserstein2_exact(d1, d2)
    gap = math.sqrt(cd) - w2
    ok = gap >= -tol
    if not ok:
        log.warning("W2 <= sqrt(chamfer) violated: W2=%.6g sqrt(CD)=%.6g", w2, math.sqrt(cd))
    return BoundReport(cd, w2, bool(ok), gap)
