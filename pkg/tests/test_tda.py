import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.cluster.hierarchy import linkage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from oracles import brute_betti1, pairwise
from topokd.pointcloud import SceneSpec, generate_scene
from topokd.tda import (
    PersistenceDiagram,
    build_filtration,
    default_threshold,
    h0_unionfind,
    persistence,
    reduce,
    snapshot_betti,
    subsample_for_tda,
)

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def multiset(dgm, dim):
    sel = dgm.dim == dim
    return sorted(zip(dgm.birth[sel].tolist(), dgm.death[sel].tolist()))


def random_cloud(rng, m=None, d=None):
    m = m or int(rng.integers(1, 65))
    d = d or int(rng.integers(1, 4))
    return rng.normal(size=(m, d))


def bottleneck_at_most(a, b, eps):
    """True when an eps-matching (L-inf, diagonal allowed) exists between a and b."""
    n1, n2 = len(a), len(b)
    n = n1 + n2
    if n == 0:
        return True
    ok = np.zeros((n, n), dtype=bool)
    if n1 and n2:
        ok[:n1, :n2] = np.abs(a[:, None, :] - b[None, :, :]).max(-1) <= eps
    ok[:n1, n2:] = ((a[:, 1] - a[:, 0]) / 2 <= eps)[:, None]
    ok[n1:, :n2] = ((b[:, 1] - b[:, 0]) / 2 <= eps)[None, :]
    ok[n1:, n2:] = True
    match = maximum_bipartite_matching(csr_matrix(ok.astype(np.int8)), perm_type="column")
    return bool((match >= 0).all())


class TestFiltration:
    def test_two_points(self):
        f = build_filtration(np.array([[0.0], [1.0]]), maxdim=1, threshold=2.0)
        assert f.simplices == [(0,), (1,), (0, 1)]
        assert f.values.tolist() == [0.0, 0.0, 1.0]

    def test_equilateral_triangle(self):
        tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
        f = build_filtration(tri, maxdim=1, threshold=2.0)
        assert (f.dims == 0).sum() == 3 and (f.dims == 1).sum() == 3 and (f.dims == 2).sum() == 1
        np.testing.assert_allclose(f.values[f.dims > 0], 1.0, rtol=1e-15)
        # faces before cofaces even at equal value
        assert f.simplices[-1] == (0, 1, 2)

    def test_threshold_below_min_distance(self):
        f = build_filtration(SQUARE, maxdim=1, threshold=0.5)
        assert f.simplices == [(0,), (1,), (2,), (3,)]

    def test_order_and_face_closure(self):
        rng = np.random.default_rng(3)
        f = build_filtration(rng.normal(size=(12, 2)), maxdim=2)
        assert np.all(np.diff(f.values) >= 0)
        pos = f.index()
        for s, i in pos.items():
            for k in range(len(s)):
                if len(s) > 1:
                    assert pos[s[:k] + s[k + 1:]] < i

    def test_duplicate_points_give_zero_edges(self):
        f = build_filtration(np.zeros((3, 2)), maxdim=0)
        assert (f.dims == 1).sum() == 3 and np.all(f.values == 0)

    @pytest.mark.parametrize("kw", [{"maxdim": 3}, {"threshold": 0.0}, {"threshold": -1.0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            build_filtration(SQUARE, **kw)

    def test_default_threshold(self):
        assert default_threshold(SQUARE) == pytest.approx(math.sqrt(2) * 1.05)
        assert default_threshold(np.zeros((1, 3))) == 1.0


class TestReduce:
    def test_two_points(self):
        dgm = reduce(build_filtration(np.array([[0.0], [1.0]]), 1, 2.0))
        assert multiset(dgm, 0) == [(0.0, 1.0), (0.0, math.inf)]

    def test_unit_square_has_one_loop(self):
        dgm = reduce(build_filtration(SQUARE, 1, 2.0))
        bars = dgm.points(dim=1)
        assert bars.shape == (1, 2)
        assert abs(bars[0, 0] - 1.0) <= 1e-9 and abs(bars[0, 1] - math.sqrt(2)) <= 1e-9
        assert multiset(dgm, 0)[:3] == [(0.0, 1.0)] * 3 and dgm.n_infinite(0) == 1

    def test_zero_persistence_pairs_kept_but_filtered(self):
        dgm = reduce(build_filtration(SQUARE, 1, 2.0))
        h1 = multiset(dgm, 1)
        assert len(h1) == 3  # (1, sqrt 2) plus the two diagonals killed at their own value
        assert len(dgm.select(dim=1, drop_zero=False)) == 3
        assert len(dgm.select(dim=1)) == 1

    def test_h0_matches_union_find_on_200_clouds(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            pts = random_cloud(rng, m=int(rng.integers(1, 41)))
            thr = default_threshold(pts) * rng.choice([0.3, 1.0])
            a = reduce(build_filtration(pts, 0, thr))
            b = h0_unionfind(pts, thr)
            assert multiset(a, 0) == multiset(b, 0)

    @pytest.mark.parametrize("seed", range(10))
    def test_h0_deaths_match_single_linkage(self, seed):
        pts = random_cloud(np.random.default_rng(seed), m=30)
        merges = np.sort(linkage(pts, method="single")[:, 2])
        dgm = reduce(build_filtration(pts, 0))
        deaths = np.sort(dgm.death[(dgm.dim == 0) & np.isfinite(dgm.death)])
        np.testing.assert_allclose(deaths, merges, rtol=1e-12, atol=0)

    @pytest.mark.parametrize("seed", range(8))
    def test_infinite_h0_counts_components(self, seed):
        rng = np.random.default_rng(seed)
        pts = random_cloud(rng, m=25, d=2)
        thr = float(np.quantile(pairwise(pts), 0.15)) + 1e-9
        d = pairwise(pts)
        g = nx.Graph()
        g.add_nodes_from(range(len(pts)))
        g.add_edges_from((i, j) for i in range(len(pts)) for j in range(i + 1, len(pts))
                         if d[i, j] <= thr)
        assert reduce(build_filtration(pts, 1, thr)).n_infinite(0) == \
            nx.number_connected_components(g)

    @pytest.mark.parametrize("seed", range(8))
    def test_structural_invariants_and_provenance(self, seed):
        rng = np.random.default_rng(seed)
        pts = random_cloud(rng, m=14, d=3)
        f = build_filtration(pts, 1)
        dgm = reduce(f)
        pos = f.index()
        assert np.all(dgm.death >= dgm.birth)
        assert np.all(dgm.birth[dgm.dim == 0] == 0)
        d = pairwise(pts)
        for i in range(len(dgm)):
            assert f.values[pos[dgm.birth_simplex[i]]] == dgm.birth[i]
            if dgm.death_simplex[i] is not None:
                assert f.values[pos[dgm.death_simplex[i]]] == dgm.death[i]
                a, b = dgm.death_edge[i]
                assert d[a, b] == pytest.approx(dgm.death[i], rel=1e-15)
            if dgm.birth_edge[i] is not None:
                a, b = dgm.birth_edge[i]
                assert d[a, b] == pytest.approx(dgm.birth[i], rel=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pts = random_cloud(rng, m=12, d=2)
        perm = rng.permutation(len(pts))
        a, b = persistence(pts, 1), persistence(pts[perm], 1)
        for dim in (0, 1):
            np.testing.assert_allclose(np.array(multiset(a, dim)), np.array(multiset(b, dim)),
                                       rtol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_stability_under_small_perturbation(self, seed):
        delta = 1e-3
        rng = np.random.default_rng(seed)
        pts = random_cloud(rng, m=16, d=2)
        step = rng.normal(size=pts.shape)
        step *= delta * rng.uniform(0, 1, (len(pts), 1)) / np.linalg.norm(step, axis=1,
                                                                          keepdims=True)
        thr = default_threshold(pts) + 10 * delta
        a, b = persistence(pts, 1, thr), persistence(pts + step, 1, thr)
        # H0 bars are paired by rank, H1 through a bottleneck matching
        da = np.sort(a.death[(a.dim == 0) & np.isfinite(a.death)])
        db = np.sort(b.death[(b.dim == 0) & np.isfinite(b.death)])
        assert np.abs(da - db).max() <= 2 * delta + 1e-12
        assert bottleneck_at_most(a.points(1, drop_zero=False), b.points(1, drop_zero=False),
                                  2 * delta + 1e-12)

    def test_circle_scene_loop(self):
        c = generate_scene(SceneSpec("circle", 1, 0, {"n": 24}))
        dgm = persistence(c.coords, 1)
        h1 = dgm.points(dim=1)
        lo, hi = c.topology["scale_range"]
        assert len(h1) == 1 and h1[0, 0] <= lo + 1e-9 and h1[0, 1] >= hi - 1e-9


class TestUnionFind:
    def test_single_point(self):
        dgm = h0_unionfind(np.zeros((1, 3)))
        assert multiset(dgm, 0) == [(0.0, math.inf)]

    def test_separated_clusters(self):
        c = generate_scene(SceneSpec("clusters", 3, 5, {"k": 3, "radius": 0.1, "separation": 2.0}))
        dgm = h0_unionfind(c.coords, threshold=1.0)
        assert dgm.n_infinite(0) == 3

    def test_provenance_matches_reduce(self):
        pts = random_cloud(np.random.default_rng(9), m=20, d=2)
        a, b = reduce(build_filtration(pts, 0)), h0_unionfind(pts)
        key = lambda dg: sorted(zip(dg.death.tolist(), dg.birth_simplex,
                                    [e or () for e in dg.death_edge]))
        assert key(a) == key(b)

    @pytest.mark.parametrize("seed", range(5))
    def test_provenance_with_ties_and_threshold(self, seed):
        # integer lattice points give many equal edge lengths
        rng = np.random.default_rng(seed)
        pts = rng.integers(0, 4, size=(18, 2)).astype(float)
        pts = np.unique(pts, axis=0)
        for thr in (1.0, 1.5, 2.0, None):
            a = reduce(build_filtration(pts, 0, thr))
            b = h0_unionfind(pts, thr)
            key = lambda dg: sorted(zip(dg.death.tolist(), dg.birth_simplex,
                                        [e or () for e in dg.death_edge]))
            assert key(a) == key(b)

    def test_maxdim_zero_route(self):
        pts = random_cloud(np.random.default_rng(1), m=10)
        assert multiset(persistence(pts, 0), 0) == multiset(reduce(build_filtration(pts, 0)), 0)


class TestSnapshot:
    def test_circle_between_scales(self):
        c = generate_scene(SceneSpec("circle", 1, 3, {"radius": 1.0, "n": 32}))
        lo, hi = c.topology["scale_range"]
        prof = snapshot_betti(c.coords, [0.5 * (lo + hi)], 1)
        assert prof.betti[0].tolist() == [1, 1]

    def test_below_all_distances(self):
        pts = random_cloud(np.random.default_rng(0), m=9, d=2)
        prof = snapshot_betti(pts, [1e-9], 1)
        assert prof.betti[0].tolist() == [9, 0]

    @pytest.mark.parametrize("seed", range(6))
    def test_betti1_matches_gf2_rank_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pts = random_cloud(rng, m=10, d=2)
        scales = np.sort(rng.uniform(0.1, 2.0, 4))
        prof = snapshot_betti(pts, scales, 1)
        assert prof.betti[:, 1].tolist() == [brute_betti1(pts, e) for e in scales]

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (8, 2), elements=st.floats(-3, 3)),
           st.lists(st.floats(0.01, 5), min_size=2, max_size=5, unique=True))
    def test_betti0_non_increasing(self, pts, scales):
        prof = snapshot_betti(pts, sorted(scales), 0)
        assert np.all(np.diff(prof.betti[:, 0]) <= 0)

    @pytest.mark.parametrize("scales", [[], [0.5, 0.5], [1.0, 0.5]])
    def test_rejects_bad_scales(self, scales):
        with pytest.raises(ValueError):
            snapshot_betti(SQUARE, scales)


class TestSubsample:
    def test_identity_when_full(self):
        x = np.arange(12.0).reshape(6, 2)
        sub, idx = subsample_for_tda(x, 6, seed=3)
        assert idx.tolist() == list(range(6)) and np.array_equal(sub, x)

    def test_seeded_and_shared(self):
        t = np.random.default_rng(0).normal(size=(50, 8))
        s = np.random.default_rng(1).normal(size=(50, 2))
        _, i1 = subsample_for_tda(t, 20, seed=4)
        _, i2 = subsample_for_tda(s, 20, seed=4)
        assert np.array_equal(i1, i2) and len(set(i1.tolist())) == 20

    def test_too_many(self):
        with pytest.raises(ValueError):
            subsample_for_tda(np.zeros((3, 2)), 4)


class TestSerialisation:
    def test_text_roundtrip(self):
        pts = random_cloud(np.random.default_rng(5), m=10, d=2)
        dgm = persistence(pts, 1)
        text = dgm.to_text()
        assert "inf" in text
        back = PersistenceDiagram.from_text(text, maxdim=1)
        assert back.birth.tolist() == dgm.birth.tolist()
        assert back.death.tolist() == dgm.death.tolist()
        assert back.birth_simplex == dgm.birth_simplex
        assert back.death_simplex == dgm.death_simplex
