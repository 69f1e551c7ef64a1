import numpy as np
import pytest

from simulseg import autodiff as ad
from simulseg.autodiff import (
    Graph,
    ShapeMismatch,
    concat,
    embedding,
    finite_diff_check,
    layer_norm,
    linear_scan,
    masked_softmax,
    maximum,
    minimum,
    renorm_rows,
    stack,
)


def numeric_grad(f, x, h=1e-5):
    """Central differences of a scalar function of one array, test-local oracle."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def check_vjp(make_loss, x0, rtol=1e-6):
    """Assert analytic gradient of a scalar loss matches central differences."""

    def scalar(x):
        g = Graph()
        return float(make_loss(g, g.parameter("x", x)).data)

    g = Graph()
    loss = make_loss(g, g.parameter("x", x0))
    analytic = g.backward(loss)["x"]
    numeric = numeric_grad(scalar, x0.copy())
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / scale
    assert rel.max() <= rtol, f"max rel err {rel.max():.3e}"


RNG = np.random.default_rng(12345)


class TestForwardExamples:
    def test_sigmoid_zero(self):
        g = Graph()
        assert g.tensor([0.0]).sigmoid().data[0] == 0.5

    def test_masked_softmax_single_allowed(self):
        g = Graph()
        p = masked_softmax(g.tensor([1.0, 1.0]), mask=[True, False])
        np.testing.assert_allclose(p.data, [1.0, 0.0])

    def test_maxpool_windows(self):
        g = Graph()
        out = g.tensor([1.0, 0.0, 1.0, 0.0]).maxpool(2)
        np.testing.assert_array_equal(out.data, [1.0, 1.0])

    def test_maxpool_partial_window_kept(self):
        g = Graph()
        out = g.tensor([1.0, 3.0, 2.0]).maxpool(2)
        np.testing.assert_array_equal(out.data, [3.0, 2.0])

    def test_linear_scan_matches_loop(self):
        c = RNG.normal(size=4)
        d = RNG.normal(size=5)
        g = Graph()
        r = linear_scan(g.tensor(c), g.tensor(d)).data
        expect = [d[0]]
        for k in range(1, 5):
            expect.append(expect[-1] * c[k - 1] + d[k])
        np.testing.assert_allclose(r, expect, rtol=0, atol=1e-15)


class TestBackwardExamples:
    def test_quadratic(self):
        g = Graph()
        p = g.parameter("p", np.array([1.0, 2.0]))
        loss = (p * p).sum()
        np.testing.assert_allclose(g.backward(loss)["p"], [2.0, 4.0])

    def test_sigmoid_prime_at_zero(self):
        g = Graph()
        w = g.parameter("w", np.array(0.0))
        grad = g.backward(w.sigmoid())["w"]
        assert grad == pytest.approx(0.25)

    def test_backward_idempotent(self):
        g = Graph()
        p = g.parameter("p", RNG.normal(size=(3, 3)))
        loss = (p @ p).sum()
        first = g.backward(loss)["p"]
        second = g.backward(loss)["p"]
        np.testing.assert_array_equal(first, second)

    def test_unused_parameter_gets_zero_grad(self):
        g = Graph()
        p = g.parameter("p", np.array([1.0]))
        q = g.parameter("q", np.array([2.0]))
        loss = (p * p).sum()
        grads = g.backward(loss)
        np.testing.assert_array_equal(grads["q"], [0.0])
        assert q.data[0] == 2.0


class TestErrors:
    def test_shape_mismatch_reports_shapes(self):
        g = Graph()
        with pytest.raises(ShapeMismatch, match=r"\(2,\).*\(3,\)"):
            g.tensor([1.0, 2.0]) + g.tensor([1.0, 2.0, 3.0])

    def test_matmul_mismatch(self):
        g = Graph()
        with pytest.raises(ShapeMismatch):
            g.tensor(np.ones((2, 3))) @ g.tensor(np.ones((2, 3)))

    def test_sigmoid_nan_rejected(self):
        g = Graph()
        with pytest.raises(ValueError, match="NaN"):
            g.tensor([np.nan]).sigmoid()

    def test_softmax_nan_rejected(self):
        g = Graph()
        with pytest.raises(ValueError, match="NaN"):
            masked_softmax(g.tensor([np.nan, 1.0]))

    def test_softmax_empty_row_rejected(self):
        g = Graph()
        with pytest.raises(ValueError, match="no allowed"):
            masked_softmax(g.tensor([[1.0, 2.0]]), mask=[[False, False]])

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        p = g.parameter("p", np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            g.backward(p * p)

    def test_cross_graph_operands_rejected(self):
        a = Graph().tensor([1.0])
        b = Graph().tensor([1.0])
        with pytest.raises(ValueError, match="graphs"):
            a + b

    def test_duplicate_parameter_rejected(self):
        g = Graph()
        g.parameter("w", np.ones(1))
        with pytest.raises(ValueError, match="duplicate"):
            g.parameter("w", np.ones(1))


class TestGraphInvariants:
    def test_insertion_order_is_topological(self):
        g = Graph()
        a = g.parameter("a", RNG.normal(size=(2, 2)))
        b = (a * a).sum()
        order = {id(t): i for i, t in enumerate(g.nodes)}
        for node in g.nodes:
            for parent in node.parents:
                assert order[id(parent)] < order[id(node)]
        assert b is g.nodes[-1]

    def test_backward_touches_each_node_once(self):
        g = Graph()
        p = g.parameter("p", RNG.normal(size=4))
        q = p.sigmoid()
        loss = (q * q).sum()
        calls = {}
        for node in g.nodes:
            if node._vjp is None:
                continue
            orig = node._vjp

            def counted(grad, node=node, orig=orig):
                calls[id(node)] = calls.get(id(node), 0) + 1
                return orig(grad)

            node._vjp = counted
        g.backward(loss)
        assert all(c == 1 for c in calls.values())

    def test_forward_bit_deterministic(self):
        x = RNG.normal(size=(6, 6))

        def run():
            g = Graph()
            t = g.tensor(x)
            return masked_softmax(t @ t.T).sum(axis=0).cumsum(0).data.tobytes()

        assert run() == run()


# Every primitive's VJP against the central-difference oracle (spec tolerance
# 1e-6 at h=1e-5 in float64), on random inputs away from non-smooth points.
class TestPrimitiveGradients:
    def test_add_sub_mul_neg(self):
        x = RNG.normal(size=(3, 4))
        c = RNG.normal(size=(3, 4))
        check_vjp(lambda g, p: ((p + g.tensor(c)) * p - (-p)).sum(), x)

    def test_scalar_broadcast(self):
        x = RNG.normal(size=5)
        check_vjp(lambda g, p: (p * p[1:2] + p[0:1]).sum(), x)

    def test_matmul(self):
        x = RNG.normal(size=(3, 4))
        c = RNG.normal(size=(4, 2))
        check_vjp(lambda g, p: ((p @ g.tensor(c)) * (p @ g.tensor(c))).sum(), x)

    def test_transpose_reshape_slice(self):
        x = RNG.normal(size=(4, 3))
        check_vjp(lambda g, p: (p.T[1:, :3].reshape(6) * p.T[1:, :3].reshape(6)).sum(), x)

    def test_fancy_index(self):
        x = RNG.normal(size=(4, 5))
        rows = np.array([0, 1, 2, 3])
        cols = np.array([1, 1, 0, 4])
        check_vjp(lambda g, p: (p[rows, cols] * p[rows, cols]).sum(), x)

    def test_reductions(self):
        x = RNG.normal(size=(3, 4))
        check_vjp(lambda g, p: p.sum(axis=0).l2norm() + p.mean() + p.sum(), x)

    def test_cumsum(self):
        x = RNG.normal(size=(3, 4))
        check_vjp(lambda g, p: (p.cumsum(1) * p.cumsum(0)).sum(), x)

    def test_sigmoid_relu_exp_log_abs(self):
        x = RNG.normal(size=8) + 3.0  # positive, away from relu/abs kinks
        check_vjp(lambda g, p: (p.sigmoid() + p.relu() * p.exp().log() + p.abs()).sum(), x)

    def test_maxpool(self):
        x = RNG.normal(size=7)  # continuous values: no ties
        check_vjp(lambda g, p: (p.maxpool(3) * p.maxpool(3)).sum(), x)

    def test_max_min(self):
        x = RNG.normal(size=6)
        c = RNG.normal(size=6)
        check_vjp(lambda g, p: (maximum(p, g.tensor(c)) + minimum(p, g.tensor(c)) * p).sum(), x)

    def test_add_bias(self):
        x = RNG.normal(size=(3, 4))
        b0 = RNG.normal(size=4)

        def build(params):
            g = Graph()
            out = ad.add_bias(g.parameter("x", params["x"]), g.parameter("b", params["b"]))
            return (out * out).sum()

        report = finite_diff_check(build, {"x": x, "b": b0}, tol=1e-6)
        assert report.ok, report.failures

    def test_concat_stack(self):
        x = RNG.normal(size=(2, 3))

        def loss(g, p):
            both = concat([p, p * 2.0], axis=0)
            piled = stack([p[0], p[1]])
            return (both * both).sum() + (piled * piled).sum()

        check_vjp(loss, x)

    def test_masked_softmax(self):
        x = RNG.normal(size=(3, 5))
        mask = RNG.random(size=(3, 5)) > 0.3
        mask[:, 0] = True
        w = RNG.normal(size=(3, 5))
        check_vjp(lambda g, p: (masked_softmax(p, mask) * g.tensor(w)).sum(), x)

    def test_renorm_rows(self):
        x = RNG.random(size=(3, 4)) + 0.5
        w = RNG.normal(size=(3, 4))
        check_vjp(lambda g, p: (renorm_rows(p) * g.tensor(w)).sum(), x)

    def test_layer_norm(self):
        x = RNG.normal(size=(4, 6))
        w = RNG.normal(size=(4, 6))

        def loss(g, p):
            gain = g.tensor(np.full(6, 1.3))
            bias = g.tensor(np.full(6, -0.2))
            # weight by an arbitrary matrix so the gradient is O(1); a pure
            # sum-of-squares loss is invariant to the normalization up to eps
            return (layer_norm(p, gain, bias) * g.tensor(w)).sum()

        check_vjp(loss, x)

    def test_layer_norm_gain_bias_grads(self):
        x = RNG.normal(size=(4, 6))
        gain0 = RNG.normal(size=6)
        bias0 = RNG.normal(size=6)

        def build(params):
            g = Graph()
            xt = g.tensor(x)
            return (layer_norm(xt, g.parameter("gain", params["gain"]),
                               g.parameter("bias", params["bias"])).sigmoid()).sum()

        report = finite_diff_check(build, {"gain": gain0, "bias": bias0}, tol=1e-6)
        assert report.ok, report.failures

    def test_embedding(self):
        table = RNG.normal(size=(7, 4))
        ids = np.array([3, 0, 3, 6])

        def build(params):
            g = Graph()
            emb = embedding(g.parameter("table", params["table"]), ids)
            return (emb * emb).sum()

        report = finite_diff_check(build, {"table": table}, tol=1e-6)
        assert report.ok, report.failures

    def test_linear_scan(self):
        c0 = RNG.normal(size=5) * 0.8
        d0 = RNG.normal(size=6)
        w = RNG.normal(size=6)

        def build(params):
            g = Graph()
            r = linear_scan(g.parameter("c", params["c"]), g.parameter("d", params["d"]))
            return (r * g.tensor(w)).sum()

        report = finite_diff_check(build, {"c": c0, "d": d0}, tol=1e-6)
        assert report.ok, report.failures

    def test_embedding_out_of_range(self):
        g = Graph()
        with pytest.raises(ValueError, match="out of range"):
            embedding(g.tensor(np.ones((3, 2))), [0, 3])


class TestFiniteDiffCheck:
    def test_quadratic_is_near_exact(self):
        x0 = RNG.normal(size=4)

        def build(params):
            g = Graph()
            p = g.parameter("x", params["x"])
            return (p * p).sum()

        report = finite_diff_check(build, {"x": x0}, tol=1e-8)
        assert report.ok
        assert report.max_rel_err < 1e-8

    def test_nondeterministic_builder_rejected(self):
        state = {"n": 0.0}

        def build(params):
            state["n"] += 1.0
            g = Graph()
            return (g.parameter("x", params["x"]) * state["n"]).sum()

        with pytest.raises(ValueError, match="deterministic"):
            finite_diff_check(build, {"x": np.ones(2)})

    def test_failure_reported(self):
        def build(params):
            g = Graph()
            p = g.parameter("x", params["x"])
            bad = Tensor_bad(p)
            return bad.sum()

        def Tensor_bad(p):
            # deliberately wrong vjp: claims gradient 0
            return ad.Tensor(p.data * 3.0, p.graph, (p,), lambda g: (g * 0.0,))

        report = finite_diff_check(build, {"x": np.ones(2)}, tol=1e-4)
        assert not report.ok
        assert report.failures[0].name == "x"
