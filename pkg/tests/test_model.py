import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from duat.engine import ShapeError, Tape, grad_check
from duat.graph import SampledSubgraph, TextGraph, sample_k_hop
from conftest import random_graph
from duat.model import (
    DenseFeatures,
    DualAttentionParams,
    ForwardTrace,
    OneHotFeatures,
    aggregate_hop,
    connection_attention,
    dual_attention_forward,
    hop_coefficients,
    init_params,
    load_features,
    load_model,
    loss,
    plain_convolution_forward,
    save_model,
)


def leaky(x, slope=0.2):
    return x if x > 0 else slope * x


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def softmax(v):
    z = np.exp(v - np.max(v))
    return z / z.sum()


def oracle_forward(X, sub, params):
    """Loop-level transcription: per center, head and hop, score every
    sampled slot, normalize, aggregate, mix hops, concatenate heads."""
    out_rows = []
    for b, i in enumerate(sub.centers):
        heads = []
        for m in range(params.n_heads):
            W, a = params.values[f"head{m}.W"], params.values[f"head{m}.a"]
            hi = W @ X[i]
            mixed = np.zeros(params.d_out)
            for k in range(params.hops):
                nbrs = sub.hops[k][b]
                e = np.array([leaky(a @ np.concatenate([hi, W @ X[j]]), params.leaky_slope) for j in nbrs])
                alpha = softmax(e)
                agg = sum(alpha[t] * (W @ X[j]) for t, j in enumerate(nbrs))
                mixed += params.q[k] * elu(agg)
            heads.append(mixed)
        out_rows.append(np.concatenate(heads))
    h_new = np.array(out_rows)
    logits = h_new @ params.values["cls.W"].T + params.values["cls.b"]
    return np.array([softmax(r) for r in logits]), h_new


def dense_propagation_oracle(X, sub, params):
    """Plain arm as matrix products: row-normalized sampled weights P_k per
    hop, hop outputs averaged."""
    n = X.shape[0]
    B, c = len(sub.centers), params.hops
    heads = []
    for m in range(params.n_heads):
        HW = X @ params.values[f"head{m}.W"].T
        acc = np.zeros((B, params.d_out))
        for k in range(c):
            P = np.zeros((B, n))
            w = sub.edge_weights[k]
            for b in range(B):
                for t, j in enumerate(sub.hops[k][b]):
                    P[b, j] += w[b, t] / w[b].sum()
            acc += elu(P @ HW) / c
        heads.append(acc)
    logits = np.concatenate(heads, axis=1) @ params.values["cls.W"].T + params.values["cls.b"]
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def micro_setup(seed, n=6, d=5, d_out=4, heads=2, hops=2, fanout=3, classes=3):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n)
    X = rng.normal(size=(n, d))
    params = init_params(d, d_out, heads, hops, classes, seed=seed)
    sub = sample_k_hop(g, np.arange(min(3, n)), fanout, hops, seed=seed)
    return g, X, params, sub


class TestHopCoefficients:
    def test_values(self):
        assert hop_coefficients(1).tolist() == [1.0]
        np.testing.assert_allclose(hop_coefficients(2), [0.62246, 0.37754], atol=1e-5)
        np.testing.assert_allclose(hop_coefficients(3), [0.44844, 0.32132, 0.23024], atol=1e-5)

    @pytest.mark.parametrize("c", [1, 2, 3])
    def test_direct_softmax(self, c):
        raw = [1 - k / c for k in range(c)]
        total = sum(math.exp(r) for r in raw)
        np.testing.assert_allclose(hop_coefficients(c), [math.exp(r) / total for r in raw], atol=1e-15)

    @pytest.mark.parametrize("c", [1, 2, 3, 5])
    def test_distribution(self, c):
        q = hop_coefficients(c)
        assert abs(q.sum() - 1) <= 1e-12
        assert np.all(q > 0)
        assert np.all(np.diff(q) < 0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            hop_coefficients(0)


class TestConnectionAttention:
    def test_singleton(self):
        t = Tape()
        H = t.const(np.random.default_rng(0).normal(size=(2, 3)))
        _, alpha = connection_attention(t, H, t.const(np.ones(6)), np.array([0]), np.array([[1]]))
        assert alpha.value.tolist() == [[1.0]]

    def test_identical_features_uniform(self):
        t = Tape()
        H = t.const(np.tile([0.3, -1.2, 2.0], (5, 1)))
        a = t.const(np.random.default_rng(1).normal(size=6))
        _, alpha = connection_attention(t, H, a, np.array([0]), np.array([[1, 2, 3, 4]]))
        np.testing.assert_allclose(alpha.value, 0.25, atol=1e-15)

    def test_matches_transcription(self):
        rng = np.random.default_rng(2)
        Hv, av = rng.normal(size=(5, 3)), rng.normal(size=6)
        nbrs = np.array([[1, 4, 2, 1]])
        t = Tape()
        e, alpha = connection_attention(t, t.const(Hv), t.const(av), np.array([0]), nbrs, 0.2)
        expected_e = [leaky(av @ np.concatenate([Hv[0], Hv[j]])) for j in nbrs[0]]
        np.testing.assert_allclose(e.value[0], expected_e, atol=1e-12)
        np.testing.assert_allclose(alpha.value[0], softmax(np.array(expected_e)), atol=1e-12)
        # a repeated neighbor keeps two equal slots
        assert alpha.value[0, 0] == alpha.value[0, 3]


class TestAggregateHop:
    def test_one_hot_alpha(self):
        rng = np.random.default_rng(0)
        Hv = rng.normal(size=(4, 3))
        t = Tape()
        out = aggregate_hop(t, t.const(np.array([[0.0, 1.0, 0.0]])), t.const(Hv), np.array([[0, 2, 3]]))
        np.testing.assert_allclose(out.value[0], elu(Hv[2]), atol=1e-15)

    def test_constant_features(self):
        v = np.array([0.5, -0.7])
        t = Tape()
        alpha = t.const(np.array([[0.2, 0.3, 0.5]]))
        out = aggregate_hop(t, alpha, t.const(np.tile(v, (3, 1))), np.array([[0, 1, 2]]))
        np.testing.assert_allclose(out.value[0], elu(v), atol=1e-15)

    def test_identity_activation(self):
        rng = np.random.default_rng(1)
        Hv = rng.normal(size=(3, 2))
        alpha = np.array([[0.1, 0.6, 0.3]])
        t = Tape()
        out = aggregate_hop(t, t.const(alpha), t.const(Hv), np.array([[2, 0, 1]]), activation="identity")
        np.testing.assert_allclose(out.value[0], alpha[0] @ Hv[[2, 0, 1]], atol=1e-15)


class TestDualAttentionForward:
    def test_head_concatenation_width(self):
        rng = np.random.default_rng(0)
        g = random_graph(rng, 10)
        params = init_params(10, 64, 8, 1, 2, seed=0)
        sub = sample_k_hop(g, [0, 1], 5, 1, seed=0)
        trace = dual_attention_forward(OneHotFeatures(10), sub, params)
        assert trace.h_new.shape == (2, 512)

    def test_single_hop_single_head_oracle(self):
        g, X, params, sub = micro_setup(0, heads=1, hops=1)
        trace = dual_attention_forward(X, sub, params)
        Z, h_new = oracle_forward(X, sub, params)
        np.testing.assert_allclose(trace.h_new, h_new, atol=1e-12)
        np.testing.assert_allclose(trace.Z, Z, atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_multi_head_multi_hop_oracle(self, seed):
        g, X, params, sub = micro_setup(seed, n=7, heads=2, hops=3, fanout=2)
        trace = dual_attention_forward(X, sub, params)
        Z, _ = oracle_forward(X, sub, params)
        np.testing.assert_allclose(trace.Z, Z, atol=1e-12)

    def test_trace_contents(self):
        g, X, params, sub = micro_setup(1)
        trace = dual_attention_forward(X, sub, params)
        assert len(trace.alpha) == params.n_heads
        for m in range(params.n_heads):
            assert len(trace.alpha[m]) == params.hops
            for k in range(params.hops):
                assert trace.alpha[m][k].shape == sub.hops[k].shape
                np.testing.assert_allclose(trace.alpha[m][k].sum(axis=1), 1.0, atol=1e-12)
                assert trace.hop_features[m][k].shape == (3, params.d_out)
        np.testing.assert_allclose(
            trace.mixed[0], sum(q * h for q, h in zip(params.q, trace.hop_features[0])), atol=1e-12
        )

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_z_rows_sum_to_one(self, seed):
        g, X, params, sub = micro_setup(seed)
        trace = dual_attention_forward(X, sub, params)
        np.testing.assert_allclose(trace.Z.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(trace.Z >= 0)

    def test_feature_dimension_mismatch(self):
        g, X, params, sub = micro_setup(0)
        with pytest.raises(ShapeError):
            dual_attention_forward(X[:, :3], sub, params)

    def test_too_few_sampled_hops(self):
        g, X, params, _ = micro_setup(0, hops=2)
        sub = sample_k_hop(g, [0], 2, 1, seed=0)
        with pytest.raises(ShapeError):
            dual_attention_forward(X, sub, params)

    def test_one_hot_equals_identity_matrix(self):
        rng = np.random.default_rng(3)
        g = random_graph(rng, 6)
        params = init_params(6, 3, 2, 2, 2, seed=3)
        sub = sample_k_hop(g, [0, 1, 2], 3, 2, seed=3)
        labels = np.array([0, 1, 1])
        results = []
        for feats in (OneHotFeatures(6), DenseFeatures(np.eye(6))):
            trace = dual_attention_forward(feats, sub, params)
            total = loss(trace, labels, np.ones(3, bool), 5e-4)
            results.append((trace.Z, trace.tape.backward(total)))
        np.testing.assert_allclose(results[0][0], results[1][0], atol=1e-12)
        for name in results[0][1]:
            np.testing.assert_allclose(results[0][1][name], results[1][1][name], atol=1e-12)

    def test_dropout_is_seeded(self):
        g, X, params, sub = micro_setup(0)
        a = dual_attention_forward(X, sub, params, train_mode=True, dropout=0.5, dropout_seed=9).Z
        b = dual_attention_forward(X, sub, params, train_mode=True, dropout=0.5, dropout_seed=9).Z
        c = dual_attention_forward(X, sub, params, train_mode=True, dropout=0.5, dropout_seed=10).Z
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    def test_eval_mode_ignores_dropout(self):
        g, X, params, sub = micro_setup(0)
        a = dual_attention_forward(X, sub, params, train_mode=False, dropout=0.5, dropout_seed=1).Z
        b = dual_attention_forward(X, sub, params).Z
        np.testing.assert_array_equal(a, b)


class TestInvariants:
    def test_permutation_equivariance(self):
        g, X, params, sub = micro_setup(5, hops=1, fanout=5)
        base = dual_attention_forward(X, sub, params)
        perm = np.random.default_rng(0).permutation(5)
        hops = [sub.hops[0].copy()]
        hops[0][0] = hops[0][0][perm]
        weights = [sub.edge_weights[0].copy()]
        weights[0][0] = weights[0][0][perm]
        permuted = dual_attention_forward(X, SampledSubgraph(sub.centers, 5, hops, weights), params)
        np.testing.assert_allclose(permuted.alpha[0][0][0], base.alpha[0][0][0][perm], atol=1e-15)
        np.testing.assert_allclose(permuted.hop_features[0][0], base.hop_features[0][0], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50))
    def test_shift_invariance(self, seed, shift):
        g, X, params, sub = micro_setup(seed)
        trace = dual_attention_forward(X, sub, params)
        for m in range(params.n_heads):
            for k in range(params.hops):
                e, alpha = trace.scores[m][k], trace.alpha[m][k]
                t = Tape()
                shifted = t.masked_softmax(t.const(e + shift)).value
                np.testing.assert_allclose(shifted, alpha, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 4))
    def test_alpha_normalized(self, seed, hops, fanout):
        g, X, params, sub = micro_setup(seed, hops=hops, fanout=fanout)
        trace = dual_attention_forward(X, sub, params)
        for per_head in trace.alpha:
            for a in per_head:
                np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)

    def test_gradient_micro_model(self):
        g, X, params, sub = micro_setup(0, n=6, d=5, d_out=4, heads=2, hops=2)
        labels = np.array([0, 2, 1])

        def fn(tape, values):
            p = DualAttentionParams(values, 5, 4, 2, 2, 3)
            trace = dual_attention_forward(X, sub, p, tape=tape)
            return loss(trace, labels, np.ones(3, bool), 1e-3)

        assert grad_check(fn, params.values) < 1e-4

    def test_gradient_plain_arm(self):
        g, X, params, sub = micro_setup(1, hops=2)
        labels = np.array([1, 0, 2])

        def fn(tape, values):
            p = DualAttentionParams(values, 5, 4, 2, 2, 3)
            trace = plain_convolution_forward(X, sub, p, tape=tape)
            return loss(trace, labels, np.ones(3, bool), 1e-3)

        assert grad_check(fn, params.values) < 1e-4

    def test_ablation_reduction(self):
        rng = np.random.default_rng(4)
        g = random_graph(rng, 8, uniform=True)
        X = rng.normal(size=(8, 5))
        params = init_params(5, 4, 2, 3, 3, seed=4)
        sub = sample_k_hop(g, [0, 1, 2], 3, 3, seed=4)
        for m in range(2):
            params.values[f"head{m}.a"][:] = 0.0
        params.q = np.full(3, 1 / 3)
        dual = dual_attention_forward(X, sub, params).Z
        plain = plain_convolution_forward(X, sub, params).Z
        np.testing.assert_allclose(dual, plain, atol=1e-12)

    def test_uniform_attention_switch(self):
        rng = np.random.default_rng(5)
        g = random_graph(rng, 8, uniform=True)
        X = rng.normal(size=(8, 5))
        params = init_params(5, 4, 2, 1, 2, seed=5)
        sub = sample_k_hop(g, [0, 1], 4, 1, seed=5)
        dual = dual_attention_forward(X, sub, params, uniform_attention=True).Z
        plain = plain_convolution_forward(X, sub, params).Z
        np.testing.assert_allclose(dual, plain, atol=1e-12)


class TestPlainConvolution:
    def test_singleton(self):
        g = TextGraph(1, 1, [0, 1, 2], [0, 1], [1.0, 1.0])
        params = init_params(2, 2, 1, 1, 2, seed=0)
        sub = sample_k_hop(g, [0], 1, 1, seed=0)
        trace = plain_convolution_forward(OneHotFeatures(2), sub, params)
        assert trace.alpha[0][0].tolist() == [[1.0]]

    def test_equal_weights(self):
        g = random_graph(np.random.default_rng(0), 6, p=1.0, uniform=True)
        params = init_params(6, 2, 1, 1, 2, seed=0)
        sub = sample_k_hop(g, [0], 4, 1, seed=0)
        trace = plain_convolution_forward(OneHotFeatures(6), sub, params)
        np.testing.assert_allclose(trace.alpha[0][0], 0.25, atol=1e-15)

    @pytest.mark.parametrize("seed", range(4))
    def test_dense_propagation_oracle(self, seed):
        g, X, params, sub = micro_setup(seed, n=7, hops=2, fanout=3)
        trace = plain_convolution_forward(X, sub, params)
        np.testing.assert_allclose(trace.Z, dense_propagation_oracle(X, sub, params), atol=1e-12)


def fixed_trace(logits, params=None):
    tape = Tape()
    for name, v in (params or {}).items():
        tape.param(name, v)
    lt = tape.param("logits", np.asarray(logits, dtype=float))
    return ForwardTrace(tape, np.arange(len(logits)), [], [], [], [], np.zeros((len(logits), 0)), lt, None)


class TestLoss:
    def test_confident_correct(self):
        trace = fixed_trace([[1000.0, 0.0], [0.0, 1000.0]])
        assert loss(trace, [0, 1], [True, True], 0.0).value == pytest.approx(0.0, abs=1e-12)

    def test_uniform_prediction(self):
        trace = fixed_trace(np.zeros((4, 3)))
        mask = [True, True, True, False]
        assert loss(trace, [0, 1, 2, 0], mask, 0.0).value == pytest.approx(3 * math.log(3), abs=1e-12)

    def test_l2_term(self):
        tape = Tape()
        tape.param("theta", np.array(2.0))
        lt = tape.const(np.zeros((1, 2)))
        trace = ForwardTrace(tape, np.arange(1), [], [], [], [], np.zeros((1, 0)), lt, None)
        value = loss(trace, [0], [True], 0.5).value
        assert value == pytest.approx(math.log(2) + 2.0, abs=1e-12)

    def test_mean_reduction(self):
        trace = fixed_trace(np.zeros((4, 3)))
        assert loss(trace, [0, 1, 2, 0], [True] * 4, 0.0, "mean").value == pytest.approx(math.log(3))

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            loss(fixed_trace(np.zeros((2, 2))), [0, 1], [False, False], 0.0)

    def test_unmasked_rows_get_no_gradient(self):
        trace = fixed_trace(np.random.default_rng(0).normal(size=(3, 2)))
        grads = trace.tape.backward(loss(trace, [0, 1, 1], [True, False, True], 0.0))
        np.testing.assert_array_equal(grads["logits"][1], [0.0, 0.0])


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        params = init_params(5, 3, 2, 2, 4, seed=1, leaky_slope=0.1, l2=1e-3)
        save_model(params, tmp_path / "m.bin", extra={"note": "x"})
        back, extra = load_model(tmp_path / "m.bin")
        assert back.header() == params.header()
        assert extra == {"note": "x"}
        for k, v in params.values.items():
            np.testing.assert_array_equal(back.values[k], v.astype(np.float32))

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"garbage-bytes")
        with pytest.raises(ValueError):
            load_model(tmp_path / "x.bin")

    def test_feature_files(self, tmp_path):
        m = np.arange(6.0).reshape(3, 2)
        np.save(tmp_path / "f.npy", m)
        np.savetxt(tmp_path / "f.txt", m)
        np.testing.assert_array_equal(load_features(tmp_path / "f.npy").matrix, m)
        np.testing.assert_array_equal(load_features(tmp_path / "f.txt").matrix, m)

    def test_one_hot_is_identity(self):
        np.testing.assert_array_equal(OneHotFeatures(4).dense(), np.eye(4))
