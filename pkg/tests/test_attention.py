"""Temporal attention: time codes, neighbor lookup, scores, and gradients."""

import math

import numpy as np
import pytest

from badgnn.attention import (
    NeighborContext,
    NeighborIndex,
    a3_scale,
    attention_backward,
    attention_forward,
    attention_forward_batch,
    init_attention_params,
    neighbor_sample,
    time_encode,
)
from badgnn.events import synthetic_stream
from badgnn.exceptions import ConfigError, StateError, TemporalOrderError
from badgnn.linalg import grad_check
from badgnn.memory import NodeMemory


class TestTimeEncode:
    def test_zero_delta_all_ones(self):
        out = time_encode(0.0, np.array([0.3, 2.0]), np.zeros(2))
        np.testing.assert_array_equal(out, np.ones(2))

    def test_quarter_phase_zeros(self):
        out = time_encode(0.0, np.array([1.0, 5.0]), np.full(2, np.pi / 2))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(12)
        dt = float(rng.uniform(0, 100))
        omega = rng.standard_normal(5)
        bias = rng.standard_normal(5)
        out = time_encode(dt, omega, bias)
        expected = [math.cos(omega[i] * dt + bias[i]) for i in range(5)]
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_negative_delta_rejected(self):
        with pytest.raises(TemporalOrderError):
            time_encode(-1.0, np.ones(2), np.zeros(2))

    def test_range(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            out = time_encode(
                float(rng.uniform(0, 1e6)), rng.standard_normal(8),
                rng.standard_normal(8),
            )
            assert (np.abs(out) <= 1.0).all()


def brute_force_neighbors(stream, node, t, m):
    """Independent full-scan oracle for recency sampling."""
    rows = []
    for i in range(len(stream)):
        if stream.t[i] >= t:
            continue
        if stream.src[i] == node:
            rows.append((float(stream.t[i]), int(stream.seq[i]), int(stream.dst[i])))
        elif stream.dst[i] == node:
            rows.append((float(stream.t[i]), int(stream.seq[i]), int(stream.src[i])))
    rows.sort()
    return rows[-m:]


class TestNeighborSample:
    def test_cold_node(self):
        stream = synthetic_stream(10, seed=0)
        mem = NodeMemory(stream.n_nodes, 3)
        ctx = neighbor_sample(0, 0.0, 2, stream, mem)
        assert len(ctx) == 0 and ctx.padded

    def test_recency_rule(self):
        stream = synthetic_stream(30, n_users=2, n_items=2, seed=1)
        mem = NodeMemory(stream.n_nodes, 3)
        node = int(stream.src[10])
        t = float(stream.t[-1]) + 1.0
        ctx = neighbor_sample(node, t, 1, stream, mem)
        expected = brute_force_neighbors(stream, node, t, 1)
        assert len(ctx) == 1
        assert ctx.ids[0] == expected[0][2]
        assert ctx.dt[0] == pytest.approx(t - expected[0][0])

    def test_top3_matches_full_scan(self):
        stream = synthetic_stream(60, n_users=3, n_items=3, seed=2)
        mem = NodeMemory(stream.n_nodes, 2)
        for node in range(stream.n_nodes):
            for t in (float(stream.t[20]), float(stream.t[45]) + 0.5):
                ctx = neighbor_sample(node, t, 3, stream, mem)
                expected = brute_force_neighbors(stream, node, t, 3)
                assert len(ctx) == len(expected)
                assert ctx.ids.tolist() == [e[2] for e in expected]

    def test_index_matches_reference(self):
        stream = synthetic_stream(80, n_users=4, n_items=4, seed=3)
        mem = NodeMemory(stream.n_nodes, 2)
        index = NeighborIndex(stream.n_nodes)
        index.insert_events(stream)
        for node in range(stream.n_nodes):
            t = float(stream.t[50])
            ref = neighbor_sample(node, t, 4, stream, mem)
            got = index.query(node, t, 4)
            assert [g[0] for g in got] == ref.ids.tolist()
            assert [t - g[2] for g in got] == pytest.approx(ref.dt.tolist())


class TestA3Scale:
    def test_zero_is_exactly_one(self):
        assert a3_scale(1, 100, 0.0) == 1.0

    def test_affine_value(self):
        assert a3_scale(1, 100, 0.04) == pytest.approx(5.0, abs=1e-12)

    def test_pure_form_identity(self):
        # lambda that makes the affine form equal the raw m*n multiplier
        m = n = 2
        lam = (m * n - 1) / (m * n)
        assert a3_scale(m, n, lam) == pytest.approx(4.0, abs=1e-12)
        assert a3_scale(m, n, 0.0, form="pure") == 4.0

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            a3_scale(1, 10, -0.1)


def make_params(seed=0, d_mem=3, d_e=2, d_time=2, d_k=3, h=2, d_emb=3):
    return init_attention_params(
        d_mem=d_mem, d_e=d_e, d_time=d_time, d_k=d_k, n_heads=h, d_emb=d_emb,
        rng=np.random.default_rng(seed),
    )


def make_inputs(seed, b=2, m=3, d_mem=3, d_e=2, full_mask=True):
    rng = np.random.default_rng(seed)
    states_q = rng.standard_normal((b, d_mem))
    nbr_states = rng.standard_normal((b, m, d_mem))
    nbr_feats = rng.standard_normal((b, m, d_e))
    dt_k = rng.uniform(0, 5, size=(b, m))
    mask = np.ones((b, m), dtype=bool)
    if not full_mask:
        mask[0, -1] = False
    return states_q, np.zeros(b), nbr_states, nbr_feats, dt_k, mask


def naive_forward_oracle(states_q, dt_q, nbr_states, nbr_feats, dt_k, mask, p, c):
    """Pure-python per-entry recomputation of the multi-head embedding."""
    b, m = mask.shape
    h, _, d_k = p.mq.shape
    out = np.zeros((b, p.d_emb))
    all_weights = np.zeros((h, b, m))
    for bi in range(b):
        x_q = list(states_q[bi]) + [
            math.cos(p.time_omega[i] * dt_q[bi] + p.time_bias[i])
            for i in range(p.d_time)
        ]
        k_in = []
        for j in range(m):
            if mask[bi, j]:
                row = list(nbr_states[bi, j]) + list(nbr_feats[bi, j]) + [
                    math.cos(p.time_omega[i] * dt_k[bi, j] + p.time_bias[i])
                    for i in range(p.d_time)
                ]
            else:
                row = [0.0] * p.d_kv_in
            k_in.append(row)
        concat = []
        for head in range(h):
            q = [sum(x_q[i] * p.mq[head, i, kk] for i in range(p.d_q_in))
                 for kk in range(d_k)]
            logits = []
            for j in range(m):
                kv = [sum(k_in[j][i] * p.mk[head, i, kk] for i in range(p.d_kv_in))
                      for kk in range(d_k)]
                logits.append(
                    c * sum(q[kk] * kv[kk] for kk in range(d_k)) / math.sqrt(d_k)
                )
            masked_logits = [logits[j] if mask[bi, j] else -math.inf for j in range(m)]
            top = max(x for x in masked_logits if x != -math.inf)
            exps = [math.exp(x - top) if x != -math.inf else 0.0 for x in masked_logits]
            tot = sum(exps)
            weights = [e / tot for e in exps]
            all_weights[head, bi] = weights
            head_out = []
            for kk in range(d_k):
                acc = 0.0
                for j in range(m):
                    vv = sum(k_in[j][i] * p.mv[head, i, kk] for i in range(p.d_kv_in))
                    acc += weights[j] * vv
                head_out.append(acc)
            concat.extend(head_out)
        for e in range(p.d_emb):
            out[bi, e] = sum(concat[i] * p.w0[i, e] for i in range(h * d_k))
    return out, all_weights


class TestAttentionForward:
    def test_single_neighbor_weight_one(self):
        p = make_params()
        rng = np.random.default_rng(5)
        state = rng.standard_normal(3)
        ctx = NeighborContext(
            ids=np.array([1]), states=rng.standard_normal((1, 3)),
            feats=rng.standard_normal((1, 2)), dt=np.array([2.0]),
        )
        emb, cache = attention_forward(state, ctx, p)
        np.testing.assert_array_equal(cache.weights, np.ones((2, 1, 1)))
        # output equals W0 applied to the concatenated projected values
        k_in = cache.k_in[0, 0]
        vals = np.concatenate([k_in @ p.mv[h] for h in range(2)])
        np.testing.assert_allclose(emb, vals @ p.w0, atol=1e-14)

    def test_matches_naive_loop_oracle(self):
        p = make_params(seed=21)
        inputs = make_inputs(22, b=2, m=3, full_mask=False)
        for c in (1.0, 3.5):
            out, cache = attention_forward_batch(*inputs, p, c=c)
            expected, weights = naive_forward_oracle(*inputs, p, c)
            np.testing.assert_allclose(out, expected, atol=1e-12)
            np.testing.assert_allclose(cache.weights, weights, atol=1e-12)

    def test_weight_rows_sum_to_one(self):
        p = make_params(seed=31)
        inputs = make_inputs(32, b=4, m=3, full_mask=False)
        for c in (1.0, 2.0, 10.0):
            _, cache = attention_forward_batch(*inputs, p, c=c)
            sums = cache.weights.sum(axis=2)
            np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_baseline_path_bit_identical(self):
        # c == 1 must match an implementation with no multiplier code at all
        p = make_params(seed=41)
        sq, dq, ns, nf, dtk, mask = make_inputs(42)
        out, cache = attention_forward_batch(sq, dq, ns, nf, dtk, mask, p, c=1.0)

        code_q = np.cos(np.multiply.outer(dq, p.time_omega) + p.time_bias)
        code_k = np.cos(np.multiply.outer(dtk, p.time_omega) + p.time_bias)
        x_q = np.concatenate([sq, code_q], axis=1)
        k_in = np.concatenate([ns, nf, code_k], axis=2)
        k_in = np.where(mask[:, :, None], k_in, 0.0)
        q = np.einsum("bi,hik->hbk", x_q, p.mq)
        k = np.einsum("bmi,hik->hbmk", k_in, p.mk)
        v = np.einsum("bmi,hik->hbmk", k_in, p.mv)
        logits = np.einsum("hbk,hbmk->hbm", q, k) / np.sqrt(p.d_k)
        logits = np.where(mask[None, :, :], logits, -np.inf)
        from badgnn.linalg import row_softmax

        h, b, m = logits.shape
        weights = row_softmax(logits.reshape(h * b, m)).reshape(h, b, m)
        heads = np.einsum("hbm,hbmk->hbk", weights, v)
        plain = np.moveaxis(heads, 0, 1).reshape(b, h * p.d_k) @ p.w0

        assert np.array_equal(out, plain)

    def test_concentration_monotone_in_multiplier(self):
        p = make_params(seed=51)
        inputs = make_inputs(52, b=3, m=4)
        n_input = p.d_kv_in
        prev = None
        for lam in (0.0, 0.01, 0.02, 0.04, 0.1):
            c = a3_scale(4, n_input, lam)
            _, cache = attention_forward_batch(*inputs, p, c=c)
            top = cache.weights.max(axis=2)
            if prev is not None:
                assert (top >= prev - 1e-15).all()
            prev = top

    def test_permutation_equivariance(self):
        p = make_params(seed=61)
        sq, dq, ns, nf, dtk, mask = make_inputs(62, b=2, m=4)
        out, cache = attention_forward_batch(sq, dq, ns, nf, dtk, mask, p, c=2.0)
        perm = np.array([2, 0, 3, 1])
        out_p, cache_p = attention_forward_batch(
            sq, dq, ns[:, perm], nf[:, perm], dtk[:, perm], mask[:, perm], p, c=2.0
        )
        np.testing.assert_allclose(cache_p.weights, cache.weights[:, :, perm],
                                   atol=1e-13)
        np.testing.assert_allclose(out_p, out, atol=1e-13)

    def test_self_fallback_on_empty_context(self):
        p = make_params(seed=71)
        state = np.random.default_rng(72).standard_normal(3)
        empty = NeighborContext(
            ids=np.zeros(0, dtype=np.int64), states=np.zeros((0, 3)),
            feats=np.zeros((0, 2)), dt=np.zeros(0),
        )
        emb, cache = attention_forward(state, empty, p)
        assert cache.self_fallback[0]
        self_in = np.concatenate([state, np.zeros(2), np.ones(2)])  # cos(0)=1
        vals = np.concatenate([self_in @ p.mv[h] for h in range(2)])
        np.testing.assert_allclose(emb, vals @ p.w0, atol=1e-14)

    def test_multiplier_below_one_rejected(self):
        p = make_params()
        with pytest.raises(ConfigError):
            attention_forward_batch(*make_inputs(1), p, c=0.5)


class TestAttentionBackward:
    def test_missing_cache_raises(self):
        with pytest.raises(StateError):
            attention_backward(None, np.zeros((1, 3)))

    def test_zero_upstream_gives_zero_grads(self):
        p = make_params(seed=81)
        inputs = make_inputs(82)
        _, cache = attention_forward_batch(*inputs, p, c=2.0)
        g = attention_backward(cache, np.zeros((2, 3)))
        for arr in (g.mq, g.mk, g.mv, g.w0, g.time_omega, g.time_bias,
                    g.d_states_q, g.d_nbr_states):
            assert not arr.any()

    def test_all_gradients_match_finite_differences(self):
        p = make_params(seed=91)
        sq, dq, ns, nf, dtk, mask = make_inputs(92, b=2, m=3, full_mask=False)
        rng = np.random.default_rng(93)
        upstream = rng.standard_normal((2, 3))
        c = 2.5

        _, cache = attention_forward_batch(sq, dq, ns, nf, dtk, mask, p, c=c)
        g = attention_backward(cache, upstream)

        import dataclasses

        param_grads = {
            "mq": g.mq, "mk": g.mk, "mv": g.mv, "w0": g.w0,
            "time_omega": g.time_omega, "time_bias": g.time_bias,
        }
        for name, grad in param_grads.items():
            def f(x, name=name):
                pc = dataclasses.replace(p, **{name: x.reshape(getattr(p, name).shape)})
                out, _ = attention_forward_batch(sq, dq, ns, nf, dtk, mask, pc, c=c)
                return float(np.sum(out * upstream))

            report = grad_check(f, grad, getattr(p, name), name)
            assert report.passed, str(report)

        report = grad_check(
            lambda x: float(np.sum(
                attention_forward_batch(x, dq, ns, nf, dtk, mask, p, c=c)[0]
                * upstream)),
            g.d_states_q, sq, "states_q",
        )
        assert report.passed, str(report)
        report = grad_check(
            lambda x: float(np.sum(
                attention_forward_batch(sq, dq, x, nf, dtk, mask, p, c=c)[0]
                * upstream)),
            g.d_nbr_states, ns, "nbr_states",
        )
        assert report.passed, str(report)

    def test_doubling_multiplier_doubles_score_gradient(self):
        p = make_params(seed=95)
        inputs = make_inputs(96)
        rng = np.random.default_rng(97)
        upstream = rng.standard_normal((2, 3))
        _, cache = attention_forward_batch(*inputs, p, c=2.0)
        g1 = attention_backward(cache, upstream)
        cache.c = 4.0  # same weights/values, doubled multiplier on the chain
        g2 = attention_backward(cache, upstream)
        np.testing.assert_allclose(g2.mq, 2.0 * g1.mq, rtol=1e-12)
        np.testing.assert_allclose(g2.mk, 2.0 * g1.mk, rtol=1e-12)
