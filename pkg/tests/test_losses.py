import math

import numpy as np
import pytest

from simulseg.autodiff import Graph, finite_diff_check
from simulseg.losses import (
    LossConfig,
    al_constraint,
    cross_entropy,
    cw_constraint,
    total_loss,
)
from simulseg.mapping import expected_mapping

RNG = np.random.default_rng(4242)


def naive_smoothed_ce(dists, refs, eps):
    """Independent loop implementation of the smoothed cross-entropy."""
    i_total, vocab = dists.shape
    total = 0.0
    for i in range(i_total):
        for v in range(vocab):
            q = eps / vocab + (1.0 - eps) * (1.0 if v == refs[i] else 0.0)
            if q > 0.0:
                total -= q * math.log(dists[i, v])
    return total / i_total


def naive_cw(alpha, target_len, source_len, lam):
    target = lam * target_len
    kernel = source_len if target <= 0 else max(int(source_len // target), 1)
    pooled = []
    for s in range(0, len(alpha), kernel):
        pooled.append(max(alpha[s:s + kernel]))
    return abs(sum(alpha) - target) + abs(sum(pooled) - target)


class TestCrossEntropy:
    def test_one_hot_correct_is_zero(self):
        g = Graph()
        dists = np.zeros((3, 4))
        refs = [1, 3, 0]
        for i, r in enumerate(refs):
            dists[i, r] = 1.0
        assert float(cross_entropy(g.tensor(dists), refs).data) == 0.0

    def test_uniform_is_log_v(self):
        g = Graph()
        vocab = 7
        dists = np.full((2, vocab), 1.0 / vocab)
        loss = cross_entropy(g.tensor(dists), [0, 6])
        assert float(loss.data) == pytest.approx(math.log(vocab), rel=1e-12)

    def test_smoothed_matches_naive_loop(self):
        for _ in range(20):
            i_total, vocab = int(RNG.integers(1, 6)), int(RNG.integers(2, 9))
            logits = RNG.normal(size=(i_total, vocab))
            dists = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
            refs = RNG.integers(0, vocab, size=i_total).tolist()
            eps = float(RNG.uniform(0.0, 0.4))
            g = Graph()
            loss = float(cross_entropy(g.tensor(dists), refs, eps).data)
            assert loss == pytest.approx(naive_smoothed_ce(dists, refs, eps), rel=1e-10)

    def test_out_of_vocab_rejected(self):
        g = Graph()
        with pytest.raises(ValueError, match="vocabulary"):
            cross_entropy(g.tensor(np.full((1, 3), 1 / 3)), [3])


class TestCwConstraint:
    def test_exact_fit_is_zero(self):
        g = Graph()
        loss = cw_constraint(g.tensor([1.0, 0.0, 1.0, 0.0]), 2, 4, 1.0)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_alpha_kernel_one(self):
        j_total, i_total, lam = 6, 4, 1.0
        # kernel floor(6/4) = 1: pooling is the identity
        val = lam * i_total / j_total
        g = Graph()
        loss = cw_constraint(g.tensor(np.full(j_total, val)), i_total, j_total, lam)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_matches_naive_including_doubled(self):
        for _ in range(30):
            j_total = int(RNG.integers(2, 12))
            i_total = int(RNG.integers(1, 10))
            lam = float(RNG.uniform(0.05, 1.0))
            alpha = RNG.random(j_total)
            for scale in (1.0, 2.0):
                vals = alpha * scale
                g = Graph()
                got = float(cw_constraint(g.tensor(vals), i_total, j_total, lam).data)
                assert got == pytest.approx(
                    naive_cw(vals.tolist(), i_total, j_total, lam), rel=1e-12)

    def test_small_kernel_clamped(self):
        g = Graph()
        # floor(3 / (1.0 * 5)) = 0 -> clamped to 1
        loss = cw_constraint(g.tensor([0.2, 0.2, 0.2]), 5, 3, 1.0)
        assert float(loss.data) == pytest.approx(abs(0.6 - 5) + abs(0.6 - 5), rel=1e-12)

    def test_lambda_zero(self):
        g = Graph()
        loss = cw_constraint(g.tensor([0.5, 0.5]), 4, 2, 0.0)
        assert float(loss.data) == pytest.approx(1.0 + 0.5, rel=1e-12)


class TestAlConstraint:
    def test_lower_triangular(self):
        n = 5
        g = Graph()
        val = float(al_constraint(g.tensor(np.tril(np.ones((n, n))))).data)
        assert val == pytest.approx((n + 1) / 2, rel=1e-12)

    def test_all_ones_is_source_len(self):
        g = Graph()
        val = float(al_constraint(g.tensor(np.ones((3, 7)))).data)
        assert val == pytest.approx(7.0, rel=1e-12)

    def test_matches_naive_loop(self):
        m = RNG.random((4, 6))
        g = Graph()
        got = float(al_constraint(g.tensor(m)).data)
        naive = sum(m[i, j] for i in range(4) for j in range(6)) / 4
        assert got == pytest.approx(naive, rel=1e-12)

    def test_monotone_in_m(self):
        m = RNG.random((4, 6))
        bumped = m + RNG.uniform(0.01, 0.1, size=m.shape)
        g = Graph()
        assert float(al_constraint(g.tensor(bumped)).data) > float(
            al_constraint(g.tensor(m)).data)


class TestTotalLoss:
    def test_sum(self):
        rep = total_loss(1.0, 0.2, 0.3)
        assert rep.total == pytest.approx(1.5, abs=1e-12)

    def test_zero_latency(self):
        rep = total_loss(0.7, 0.0, 0.0)
        assert rep.total == rep.ce == 0.7

    def test_fields_reproduced(self):
        rep = total_loss(0.11, 0.22, 0.33)
        assert (rep.ce, rep.cw_term, rep.al_term) == (0.11, 0.22, 0.33)
        assert rep.total == pytest.approx(rep.ce + rep.cw_term + rep.al_term, abs=1e-12)


class TestConfig:
    def test_bad_lambda_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(lam=1.5)

    def test_lambda_zero_legal(self):
        assert LossConfig(lam=0.0).lam == 0.0


class TestGradients:
    def test_latency_terms_match_finite_differences(self):
        j_total, i_total = 6, 4
        lam = 0.4
        # jitter away from max-pool ties
        alpha0 = RNG.uniform(0.1, 0.9, size=j_total)
        beta0 = RNG.uniform(0.2, 0.8, size=(i_total, j_total))

        def build(params):
            g = Graph()
            state = expected_mapping(g.parameter("alpha", params["alpha"]),
                                     g.parameter("beta", params["beta"]))
            return (cw_constraint(state.alpha, i_total, j_total, lam)
                    + al_constraint(state.m))

        report = finite_diff_check(build, {"alpha": alpha0, "beta": beta0}, tol=1e-4)
        assert report.ok, report.failures

    def test_cross_entropy_gradient(self):
        i_total, vocab = 3, 5
        logits0 = RNG.normal(size=(i_total, vocab))
        refs = [1, 4, 0]

        def build(params):
            g = Graph()
            from simulseg.autodiff import masked_softmax
            dists = masked_softmax(g.parameter("logits", params["logits"]))
            return cross_entropy(dists, refs, smoothing=0.1)

        report = finite_diff_check(build, {"logits": logits0}, tol=1e-4)
        assert report.ok, report.failures
