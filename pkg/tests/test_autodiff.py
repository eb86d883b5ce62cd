import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topokd.autodiff import Graph, backward, evaluate, finite_diff_check, rel_error


def three_layer(rng, n=5, widths=(4, 6, 5, 3)):
    """A random tanh-free smooth 3-layer composition with a softmax head."""
    g = Graph()
    x = g.input("x", (n, widths[0]))
    h = x
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        w = g.input(f"w{i}", (a, b))
        h = g.matmul(h, w)
        if i < len(widths) - 2:
            h = g.log(g.add(g.exp(h), 1.0))  # softplus, smooth everywhere
    onehot = np.eye(widths[-1])[rng.integers(0, widths[-1], n)]
    g.set_output(g.scale(g.sum(g.mul(g.log_softmax(h), g.const(onehot))), -1.0 / n))
    bindings = {"x": rng.normal(size=(n, widths[0]))}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        bindings[f"w{i}"] = rng.normal(scale=0.7, size=(a, b))
    return g, bindings


class TestEvaluate:
    def test_sum(self):
        g = Graph()
        x = g.input("x", (3,))
        g.set_output(g.sum(x))
        assert evaluate(g, {"x": [1.0, 2.0, 3.0]}) == 6.0

    def test_log_softmax_dot_onehot(self):
        z = np.array([0.3, -1.2, 2.0])
        g = Graph()
        x = g.input("z", (3,))
        g.set_output(g.dot(g.log(g.softmax(x)), g.const(np.array([0.0, 1.0, 0.0]))))
        expected = z[1] - np.log(np.exp(z).sum())
        assert g.evaluate({"z": z}) == pytest.approx(expected, abs=1e-15)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        g, b = three_layer(rng)
        assert g.evaluate(b) == g.evaluate(b)

    def test_unbound_input(self):
        g = Graph()
        x = g.input("x", (2,))
        g.set_output(g.sum(x))
        with pytest.raises(KeyError):
            g.evaluate({})

    def test_shape_mismatch(self):
        g = Graph()
        x = g.input("x", (2,))
        g.set_output(g.sum(x))
        with pytest.raises(ValueError):
            g.evaluate({"x": np.zeros(3)})
        with pytest.raises(ValueError):
            g.matmul(g.input("a", (2, 3)), g.input("b", (2, 3)))

    def test_non_scalar_output_rejected(self):
        g = Graph()
        with pytest.raises(ValueError):
            g.set_output(g.input("x", (2,)))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        g = Graph()
        x = g.input("x", (4,))
        g.set_output(g.sum(x))
        g.evaluate({"x": np.arange(4.0)})
        (dx,) = backward(g, [x])
        assert np.array_equal(dx, np.ones(4))

    def test_dot_gradient(self):
        g = Graph()
        x, y = g.input("x", (3,)), g.input("y", (3,))
        g.set_output(g.dot(x, y))
        yv = np.array([2.0, -1.0, 0.5])
        g.evaluate({"x": np.ones(3), "y": yv})
        dx, dy = g.backward([x, y])
        assert np.array_equal(dx, yv) and np.array_equal(dy, np.ones(3))

    def test_requires_evaluate(self):
        g = Graph()
        x = g.input("x", (2,))
        g.set_output(g.sum(x))
        with pytest.raises(RuntimeError):
            g.backward([x])

    def test_foreign_node_rejected(self):
        g, other = Graph(), Graph()
        x = g.input("x", (2,))
        y = other.input("y", (2,))
        g.set_output(g.sum(x))
        g.evaluate({"x": np.ones(2)})
        with pytest.raises(ValueError):
            g.backward([y])

    def test_gradient_of_intermediate_node(self):
        g = Graph()
        x = g.input("x", (3,))
        h = g.square(x)
        g.set_output(g.sum(g.scale(h, 3.0)))
        g.evaluate({"x": np.array([1.0, 2.0, 3.0])})
        (dh,) = g.backward([h])
        assert np.array_equal(dh, np.full(3, 3.0))

    def test_gather_scatters_multiplicity(self):
        rng = np.random.default_rng(1)
        idx = rng.integers(0, 7, size=(7, 4))
        g = Graph()
        x = g.input("x", (7, 2))
        g.set_output(g.sum(g.gather(x, idx)))
        g.evaluate({"x": rng.normal(size=(7, 2))})
        (dx,) = g.backward([x])
        hist = np.bincount(idx.reshape(-1), minlength=7).astype(float)
        assert np.array_equal(dx, np.repeat(hist[:, None], 2, axis=1))

    @pytest.mark.parametrize("seed", range(5))
    def test_linearity_over_graph_sums(self, seed):
        g1, b1 = three_layer(np.random.default_rng(seed))
        g2, b2 = three_layer(np.random.default_rng(seed + 100))
        b2["x"] = b1["x"]
        # one graph holding both losses summed
        g = Graph()
        x = g.input("x", b1["x"].shape)
        outs = []
        for tag, bind in (("a", b1), ("b", b2)):
            h = x
            ws = [k for k in bind if k.startswith("w")]
            for i, k in enumerate(sorted(ws)):
                h = g.matmul(h, g.input(f"{tag}{k}", bind[k].shape))
                if i < len(ws) - 1:
                    h = g.log(g.add(g.exp(h), 1.0))
            outs.append(g.sum(g.square(h)))
        g.set_output(g.add(outs[0], outs[1]))
        bind = {"x": b1["x"], **{f"a{k}": v for k, v in b1.items() if k != "x"},
                **{f"b{k}": v for k, v in b2.items() if k != "x"}}
        g.evaluate(bind)
        (d_sum,) = g.backward([x])
        g.evaluate(bind, [outs[0]])
        (d_a,) = g.backward([x], outs[0])
        g.evaluate(bind, [outs[1]])
        (d_b,) = g.backward([x], outs[1])
        np.testing.assert_allclose(d_sum, d_a + d_b, rtol=1e-12, atol=1e-12)

    def test_extra_upstream_gradient(self):
        g = Graph()
        x = g.input("x", (3,))
        h = g.scale(x, 2.0)
        g.set_output(g.sum(h))
        g.evaluate({"x": np.ones(3)})
        (dx,) = g.backward([x], extra={h: np.array([1.0, 0.0, -1.0])})
        assert np.array_equal(dx, np.array([4.0, 2.0, 0.0]))


class TestFiniteDifference:
    @pytest.mark.parametrize("seed", range(10))
    def test_three_layer_composition(self, seed):
        g, b = three_layer(np.random.default_rng(seed))
        rep = finite_diff_check(g, b, ["x", "w0", "w1", "w2"], h=1e-5)
        assert rep.n_checked > 0
        assert rep.max_rel_error < 1e-4

    def test_linear_graph_is_exact(self):
        # dyadic values and step keep every float operation exact
        rng = np.random.default_rng(0)
        g = Graph()
        x = g.input("x", (4, 3))
        g.set_output(g.sum(g.matmul(x, g.const(rng.integers(-8, 8, (3, 2)) / 4.0))))
        rep = finite_diff_check(g, {"x": rng.integers(-8, 8, (4, 3)) / 8.0}, "x", h=2.0**-10)
        assert rep.max_rel_error < 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_linear_graph_random_weights(self, seed):
        # no truncation error for a linear map, so a large step only trims rounding
        rng = np.random.default_rng(seed)
        g = Graph()
        x = g.input("x", (4, 3))
        g.set_output(g.sum(g.matmul(x, g.const(rng.normal(size=(3, 2))))))
        rep = finite_diff_check(g, {"x": rng.normal(size=(4, 3))}, "x", h=1e-2)
        assert rep.max_rel_error < 1e-10

    def test_abs_away_from_zero(self):
        g = Graph()
        x = g.input("x", (5,))
        g.set_output(g.sum(g.mul(g.abs(x), x)))
        rep = finite_diff_check(g, {"x": np.array([0.5, -1.0, 2.0, -0.3, 1.1])}, "x")
        assert rep.skipped["x"] == [] and rep.max_rel_error < 1e-4

    def test_abs_at_zero_is_flagged(self):
        g = Graph()
        x = g.input("x", (3,))
        g.set_output(g.sum(g.abs(x)))
        rep = finite_diff_check(g, {"x": np.array([0.0, 1.0, -2.0])}, "x")
        assert rep.skipped["x"] == [0]
        assert rep.n_checked == 2 and rep.max_rel_error < 1e-10
        # the subgradient convention at the kink
        assert rep.analytic["x"][0] == 0.0

    def test_rejects_non_positive_step(self):
        g = Graph()
        x = g.input("x", (1,))
        g.set_output(g.sum(x))
        with pytest.raises(ValueError):
            finite_diff_check(g, {"x": np.ones(1)}, "x", h=0.0)

    def test_large_input_is_subsampled(self):
        g = Graph()
        x = g.input("x", (40, 40))
        g.set_output(g.sum(g.square(x)))
        rep = finite_diff_check(g, {"x": np.random.default_rng(0).normal(size=(40, 40))},
                                "x", max_coords=50)
        assert rep.n_checked == 50

    def test_report_serialises(self):
        g = Graph()
        x = g.input("x", (2,))
        g.set_output(g.sum(g.square(x)))
        d = finite_diff_check(g, {"x": np.array([1.0, 2.0])}, "x").to_dict()
        assert d["n_checked"] == 2 and d["n_skipped"] == 0

    def test_rel_error_floor(self):
        assert rel_error(np.array(0.0), np.array(0.0)) == 0.0
        assert rel_error(np.array(1e-13), np.array(0.0)) == pytest.approx(0.1)


def _smooth_input(rng, shape, lo=0.2):
    """Values bounded away from 0 with random signs."""
    return rng.uniform(lo, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


UNARY = {
    "abs": lambda g, x: g.abs(x),
    "relu": lambda g, x: g.relu(x),
    "exp": lambda g, x: g.exp(x),
    "log": lambda g, x: g.log(g.abs(x)),
    "square": lambda g, x: g.square(x),
    "softmax": lambda g, x: g.softmax(x),
    "log_softmax": lambda g, x: g.log_softmax(x),
    "sum0": lambda g, x: g.sum(x, axis=0),
    "mean1": lambda g, x: g.mean(x, axis=1),
    "max": lambda g, x: g.max(x),
    "min": lambda g, x: g.min(x),
    "minmax": lambda g, x: g.minmax_normalize(g.sum(x, axis=1)),
    "neg": lambda g, x: -x,
    "div": lambda g, x: g.div(x, g.add(g.square(x), 1.0)),
    "col_scale": lambda g, x: g.col_scale(x, g.const(np.array([2.0, -0.5, 1.5]))),
    "bias_add": lambda g, x: g.bias_add(x, g.const(np.array([0.1, 0.2, 0.3]))),
    "gather": lambda g, x: g.gather(x, np.array([[0, 1], [1, 1], [3, 0], [2, 2]])),
    "matmul": lambda g, x: g.matmul(x, g.const(np.arange(6.0).reshape(3, 2) - 2.5)),
}


@pytest.mark.parametrize("op", sorted(UNARY))
def test_every_op_matches_finite_differences(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    g = Graph()
    x = g.input("x", (4, 3))
    y = UNARY[op](g, x)
    # contract with a random weight so every output coordinate matters
    wt = g.const(rng.normal(size=y.shape))
    g.set_output(g.sum(g.mul(y, wt)))
    for trial in range(5):
        rep = finite_diff_check(g, {"x": _smooth_input(rng, (4, 3))}, "x", h=1e-6)
        assert rep.max_rel_error < 1e-4, (op, trial)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6),
       st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_dot_is_bilinear(xs, ys):
    n = min(len(xs), len(ys))
    xv, yv = np.array(xs[:n]), np.array(ys[:n])
    g = Graph()
    x, y = g.input("x", (n,)), g.input("y", (n,))
    g.set_output(g.dot(x, y))
    g.evaluate({"x": xv, "y": yv})
    dx, dy = g.backward([x, y])
    assert np.array_equal(dx, yv) and np.array_equal(dy, xv)
