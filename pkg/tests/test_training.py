"""Losses, decoder, optimizer, ranking metrics, and the training loop."""

import math

import numpy as np
import pytest

from badgnn.events import chronological_split, make_batches, synthetic_stream
from badgnn.exceptions import DimensionError, UndefinedMetricError
from badgnn.linalg import grad_check
from badgnn.training import (
    Adam,
    DecoderParams,
    adam_step,
    average_precision,
    bce_loss,
    decoder_forward,
    grads_for_params,
    init_decoder_params,
    loss_for_params,
    predict_edge,
    roc_auc,
    run_training,
    tlr_penalty,
    tlr_penalty_grads,
    total_loss,
)
from tests.conftest import make_micro_state


class TestBceLoss:
    def test_half_is_ln2(self):
        assert bce_loss([0.5], [1.0]) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_prediction_is_tiny(self):
        y = np.array([1.0, 0.0, 1.0])
        assert bce_loss(y, y) <= 3 * -math.log1p(-1e-7) + 1e-15

    def test_two_term_value(self):
        expected = -math.log(0.7) - math.log(0.8)
        assert bce_loss([0.7, 0.2], [1.0, 0.0]) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.579818, abs=1e-6)

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = rng.uniform(0, 1, size=5)
            y = rng.integers(0, 2, size=5).astype(float)
            assert bce_loss(p, y) >= 0.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            bce_loss([0.5, 0.5], [1.0])


class TestTlrPenalty:
    def test_zero_values(self):
        assert tlr_penalty(np.ones((2, 3)), np.zeros((4, 3))) == 0.0

    def test_scalar_case(self):
        assert tlr_penalty([[3.0]], [[2.0]]) == pytest.approx(12.0, abs=1e-12)

    def test_quadratic_scaling_in_values(self):
        rng = np.random.default_rng(1)
        q = rng.standard_normal((2, 4))
        v = rng.standard_normal((3, 4))
        base = tlr_penalty(q, v)
        for c in (2.0, 0.5, 7.0):
            assert tlr_penalty(q, c * v) == pytest.approx(c * c * base, rel=1e-12)

    def test_right_orthogonal_invariance(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal((2, 4))
        v = rng.standard_normal((3, 4))
        rot, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        from badgnn.linalg import frobenius_norm

        # both factors are separately invariant under a shared right rotation
        assert frobenius_norm((q @ rot.T) @ (v @ rot.T).T) == pytest.approx(
            frobenius_norm(q @ v.T), rel=1e-12
        )
        assert frobenius_norm(v @ rot.T) == pytest.approx(
            frobenius_norm(v), rel=1e-12
        )
        assert tlr_penalty(q @ rot.T, v @ rot.T) == pytest.approx(
            tlr_penalty(q, v), rel=1e-12
        )

    def test_gradients(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal((2, 4))
        v = rng.standard_normal((3, 4))
        _, d_q, d_v = tlr_penalty_grads(q, v)
        report = grad_check(lambda x: tlr_penalty(x, v), d_q, q, "q")
        assert report.passed, str(report)
        report = grad_check(lambda x: tlr_penalty(q, x), d_v, v, "v")
        assert report.passed, str(report)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tlr_penalty(np.ones((2, 3)), np.ones((2, 4)))


class TestTotalLoss:
    def test_zero_coefficient_is_exact_baseline(self):
        assert total_loss(0.6931, 12.0, 0.0) == 0.6931

    def test_weighted_sum(self):
        assert total_loss(0.6931, 12.0, 0.0005) == pytest.approx(0.6991, abs=1e-9)

    def test_gradient_linearity(self):
        rng = np.random.default_rng(4)
        q = rng.standard_normal((2, 3))
        v = rng.standard_normal((2, 3))
        _, _, d_v = tlr_penalty_grads(q, v)
        lam = 0.25
        report = grad_check(
            lambda x: total_loss(1.0, tlr_penalty(q, x), lam), lam * d_v, v, "v"
        )
        assert report.passed, str(report)
        report = grad_check(
            lambda x: total_loss(1.0, tlr_penalty(q, x), 0.0), 0.0 * d_v, v, "v0"
        )
        assert report.passed, str(report)


class TestPredictEdge:
    def test_zero_decoder_gives_half(self):
        d = 3
        dec = DecoderParams(
            w1=np.zeros((2 * d, d)), b1=np.zeros(d), w2=np.zeros(d), b2=np.zeros(())
        )
        assert predict_edge(np.ones(d), -np.ones(d), dec) == 0.5

    def test_symmetric_decoder_swap_invariance(self):
        rng = np.random.default_rng(5)
        d = 3
        block = rng.standard_normal((d, d))
        dec = DecoderParams(
            w1=np.vstack([block, block]),  # same weights for both endpoints
            b1=rng.standard_normal(d),
            w2=rng.standard_normal(d),
            b2=np.asarray(0.3),
        )
        a, b = rng.standard_normal(d), rng.standard_normal(d)
        assert predict_edge(a, b, dec) == pytest.approx(
            predict_edge(b, a, dec), abs=1e-15
        )

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(6)
        d = 3
        dec = init_decoder_params(d, rng)
        src, dst = rng.standard_normal(d), rng.standard_normal(d)
        got = predict_edge(src, dst, dec)
        x = list(src) + list(dst)
        hidden = []
        for j in range(d):
            pre = sum(x[i] * dec.w1[i, j] for i in range(2 * d)) + dec.b1[j]
            hidden.append(max(pre, 0.0))
        logit = sum(hidden[j] * dec.w2[j] for j in range(d)) + float(dec.b2)
        expected = 1.0 / (1.0 + math.exp(-logit))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_dimension_mismatch(self):
        dec = init_decoder_params(3, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            decoder_forward(np.ones((1, 3)), np.ones((1, 4)), dec)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = np.array([1.0, -2.0])
        new_p, m, v = adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1)
        np.testing.assert_array_equal(new_p, p)
        assert not m.any() and not v.any()

    def test_first_step_magnitude(self):
        lr = 0.05
        new_p, _, _ = adam_step(
            np.zeros(1), np.ones(1), np.zeros(1), np.zeros(1), 1, lr
        )
        assert abs(new_p[0] + lr) <= lr * 1e-7  # |update| = lr/(1+eps)

    def test_constant_gradient_monotone(self):
        p = np.array([5.0])
        m = v = np.zeros(1)
        history = [p[0]]
        for t in range(1, 101):
            p, m, v = adam_step(p, np.ones(1), m, v, t, 0.01)
            history.append(p[0])
        assert all(b < a for a, b in zip(history, history[1:]))

    def test_keyed_optimizer_updates_in_place(self):
        params = {"a": np.array([1.0, 1.0])}
        opt = Adam(lr=0.1)
        ref = params["a"]
        opt.step(params, {"a": np.array([1.0, -1.0])})
        assert ref is params["a"]
        assert ref[0] < 1.0 and ref[1] > 1.0


def brute_force_ap(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            total += hits / rank
    return total / hits


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = 0.0
    for sp in pos:
        for sn in neg:
            credit += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
    return credit / (len(pos) * len(neg))


class TestRankingMetrics:
    def test_perfect_separation(self):
        scores = [0.9, 0.8, 0.2, 0.1]
        labels = [1, 1, 0, 0]
        assert average_precision(scores, labels) == 1.0
        assert roc_auc(scores, labels) == 1.0

    def test_interleaved_example(self):
        scores = [0.9, 0.8, 0.7]
        labels = [1, 0, 1]
        assert average_precision(scores, labels) == pytest.approx(
            (1.0 + 2.0 / 3.0) / 2.0, abs=1e-12
        )
        assert roc_auc(scores, labels) == 0.5

    def test_all_ties_give_half_auc(self):
        assert roc_auc([0.4, 0.4, 0.4, 0.4], [1, 0, 1, 0]) == 0.5

    def test_matches_brute_force_on_random_sequences(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(2, 10))
            scores = rng.choice([0.1, 0.4, 0.7, 0.9], size=n)
            labels = rng.integers(0, 2, size=n).astype(float)
            if labels.sum() in (0, n):
                continue
            assert average_precision(scores, labels) == pytest.approx(
                brute_force_ap(scores.tolist(), labels.tolist()), abs=1e-12
            )
            assert roc_auc(scores, labels) == pytest.approx(
                brute_force_auc(scores.tolist(), labels.tolist()), abs=1e-12
            )

    def test_degenerate_labels_rejected(self):
        with pytest.raises(UndefinedMetricError):
            average_precision([0.5, 0.6], [1, 1])
        with pytest.raises(UndefinedMetricError):
            roc_auc([0.5, 0.6], [0, 0])


class TestStepGradients:
    @pytest.mark.parametrize("lambda_tlr,lambda_a3", [(0.0, 0.0), (0.01, 0.02)])
    def test_every_parameter_matrix(self, lambda_tlr, lambda_a3):
        stream, mem, index, params, cfg, batch, negs = make_micro_state(
            seed=0, lambda_tlr=lambda_tlr, lambda_a3=lambda_a3
        )
        grads = grads_for_params(batch, negs, mem, index, params, cfg)
        flat = params.flatten()
        for key in flat:
            def f(x, key=key):
                pc = params.copy()
                pc.flatten()[key][...] = x.reshape(flat[key].shape)
                return loss_for_params(batch, negs, mem, index, pc, cfg)

            report = grad_check(f, grads[key], flat[key], key)
            assert report.passed, str(report)

    def test_tlr_changes_query_gradient(self):
        stream, mem, index, params, cfg0, batch, negs = make_micro_state(
            seed=1, lambda_tlr=0.0
        )
        import dataclasses

        cfg1 = dataclasses.replace(cfg0, lambda_tlr=0.05)
        g0 = grads_for_params(batch, negs, mem, index, params, cfg0)
        g1 = grads_for_params(batch, negs, mem, index, params, cfg1)
        assert not np.array_equal(g0["att.mq"], g1["att.mq"])
        assert not np.array_equal(g0["att.mv"], g1["att.mv"])


class TestTrainingLoop:
    def test_single_batch_is_one_optimizer_step(self):
        stream = synthetic_stream(40, seed=8)
        from badgnn.attention import NeighborIndex
        from badgnn.memory import NodeMemory
        from badgnn.training import TrainConfig, init_model_params, train_epoch

        cfg = TrainConfig(batch_size=40, d_mem=4, d_time=2, d_k=2, h=1, m=1,
                          dropout_rate=0.0, seed=0)
        params = init_model_params(cfg, stream.d_e)
        opt = Adam(cfg.lr)
        mem = NodeMemory(stream.n_nodes, cfg.d_mem)
        index = NeighborIndex(stream.n_nodes)
        train_epoch(stream, mem, params, cfg, index, opt, stream.destinations())
        assert opt.t == 1

    def test_bitwise_determinism(self):
        stream = synthetic_stream(120, seed=9)
        tr, va, te = chronological_split(stream, 0.7, 0.15)
        from badgnn.training import TrainConfig

        cfg = TrainConfig(batch_size=16, epochs=2, d_mem=4, d_time=2, d_k=2,
                          h=2, m=2, lambda_tlr=0.0005, lambda_a3=0.04, seed=5)
        r1 = run_training(tr, va, te, cfg)
        r2 = run_training(tr, va, te, cfg)
        for a, b in zip(r1.history, r2.history):
            assert (a.train.ap, a.train.auc, a.train.loss) == (
                b.train.ap, b.train.auc, b.train.loss
            )
            assert (a.test.ap, a.test.auc) == (b.test.ap, b.test.auc)
        for key, arr in r1.params.flatten().items():
            assert np.array_equal(arr, r2.params.flatten()[key]), key
        assert np.array_equal(r1.memory.state, r2.memory.state)

    def test_regularizers_change_the_run(self):
        stream = synthetic_stream(120, seed=10)
        tr, va, te = chronological_split(stream, 0.7, 0.15)
        from badgnn.training import TrainConfig

        base = TrainConfig(batch_size=16, epochs=1, d_mem=4, d_time=2, d_k=2,
                           h=2, m=2, seed=5)
        import dataclasses

        full = dataclasses.replace(base, lambda_tlr=0.01, lambda_a3=0.04)
        r_base = run_training(tr, va, te, base)
        r_full = run_training(tr, va, te, full)
        assert not np.array_equal(
            r_base.params.flatten()["att.mq"], r_full.params.flatten()["att.mq"]
        )
