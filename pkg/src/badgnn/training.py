"""Link-prediction training on temporal batches.

Per batch, in order: fold the previous batch's staged messages into memory,
embed the batch's endpoints (plus one sampled negative destination per
event), score edges with a one-hidden-layer decoder, take summed binary
cross-entropy plus the query-value regularizer, backpropagate by hand, step
Adam, then stage this batch's raw messages. A batch therefore never predicts
with its own events, and batch size 1 is exactly sequential processing.

Everything is deterministic given the config seed: negative draws and
dropout masks come from per-(epoch, batch) seeded generators.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (
    AttentionParams,
    NeighborIndex,
    a3_scale,
    attention_backward,
    attention_forward_batch,
    init_attention_params,
)
from .events import Batch, EventStream, make_batches, sample_negatives
from .exceptions import ConfigError, DimensionError, UndefinedMetricError
from .linalg import frobenius_norm
from .memory import (
    GruParams,
    NodeMemory,
    flush_and_apply,
    flush_backward,
    init_gru_params,
)
from .validation import check_non_negative, check_positive_int, check_same_length

BCE_EPS = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Architecture sizes, optimization settings, and method coefficients."""

    batch_size: int = 200
    lambda_tlr: float = 0.0
    lambda_a3: float = 0.0
    lr: float = 5e-4
    epochs: int = 1
    seed: int = 0
    d_mem: int = 32
    d_time: int = 16
    h: int = 2
    d_k: int = 8
    m: int = 1
    dropout_rate: float = 0.1
    a3_form: str = "affine"
    aggregator: str = "last"
    sigma: float = 1e-3

    def validate(self) -> None:
        check_positive_int(self.batch_size, "batch_size")
        check_non_negative(self.lambda_tlr, "lambda_tlr")
        check_non_negative(self.lambda_a3, "lambda_a3")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        check_positive_int(self.epochs, "epochs")
        for name in ("d_mem", "d_time", "h", "d_k", "m"):
            check_positive_int(getattr(self, name), name)
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def d_emb(self) -> int:
        return self.d_mem

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "lambda_tlr": self.lambda_tlr,
            "lambda_a3": self.lambda_a3,
            "lr": self.lr,
            "epochs": self.epochs,
            "seed": self.seed,
            "d_mem": self.d_mem,
            "d_time": self.d_time,
            "h": self.h,
            "d_k": self.d_k,
            "m": self.m,
            "dropout_rate": self.dropout_rate,
            "a3_form": self.a3_form,
            "aggregator": self.aggregator,
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Metrics:
    """Ranking quality and loss for one pass over a stream."""

    ap: float
    auc: float
    loss: float
    epoch_time_s: float = 0.0

    def json_line(self, epoch: int, cfg: TrainConfig) -> str:
        return json.dumps(
            {
                "epoch": epoch,
                "ap": self.ap,
                "auc": self.auc,
                "loss": self.loss,
                "epoch_time_s": self.epoch_time_s,
                "batch_size": cfg.batch_size,
                "lambda_tlr": cfg.lambda_tlr,
                "lambda_a3": cfg.lambda_a3,
                "seed": cfg.seed,
            },
            sort_keys=True,
        )


# ---------------------------------------------------------------------------
# losses and penalty
# ---------------------------------------------------------------------------

def bce_loss(p, y) -> float:
    """Summed binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    check_same_length(p, y, "p", "y")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.sum(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))


def _bce_dlogit(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Gradient wrt pre-sigmoid logits of the clamped loss: (p - y) where the
    # clamp is inactive, exactly 0 where it saturates.
    active = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    return np.where(active, p - y, 0.0)


def tlr_penalty(q_mat, v_mat) -> float:
    """Query-value interaction penalty: ``‖Q Vᵀ‖_F · ‖V‖_F``.

    Small when the query rows are near-orthogonal to the value rows; adding
    it to the loss caps how much the attention interaction term can grow.
    """
    q = np.asarray(q_mat, dtype=np.float64)
    v = np.asarray(v_mat, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if v.ndim == 1:
        v = v[None, :]
    if q.shape[1] != v.shape[1]:
        raise DimensionError(
            f"inner dimensions differ: Q is {q.shape}, V is {v.shape}"
        )
    return frobenius_norm(q @ v.T) * frobenius_norm(v) if v.any() else 0.0


def tlr_penalty_grads(q_mat, v_mat):
    """Penalty value plus analytic gradients wrt Q and V (zero-safe at 0)."""
    q = np.asarray(q_mat, dtype=np.float64)
    v = np.asarray(v_mat, dtype=np.float64)
    u = q @ v.T
    alpha = np.sqrt(np.sum(u * u))
    beta = np.sqrt(np.sum(v * v))
    r = alpha * beta
    if alpha == 0.0 or beta == 0.0:
        return r, np.zeros_like(q), np.zeros_like(v)
    d_q = (beta / alpha) * (u @ v)
    d_v = (beta / alpha) * (u.T @ q) + (alpha / beta) * v
    return r, d_q, d_v


def total_loss(bce: float, r: float, lambda_tlr: float) -> float:
    check_non_negative(lambda_tlr, "lambda_tlr")
    return bce + lambda_tlr * r


def _tlr_batch_terms(q: np.ndarray, v: np.ndarray):
    """Mean penalty over heads and targets, with gradients wrt q and v.

    ``q``: (h, B, d_k) projected queries, ``v``: (h, B, m, d_k) projected
    values (padded slots are exact zeros and contribute nothing).
    """
    u = np.einsum("hbk,hbmk->hbm", q, v)
    alpha = np.sqrt(np.sum(u * u, axis=2))            # (h, B)
    beta = np.sqrt(np.sum(v * v, axis=(2, 3)))        # (h, B)
    r = alpha * beta
    n_terms = r.size
    r_mean = float(r.sum() / n_terms)

    safe_alpha = np.where(alpha > 0, alpha, 1.0)
    safe_beta = np.where(beta > 0, beta, 1.0)
    live = (alpha > 0) & (beta > 0)
    coef_a = np.where(live, beta / safe_alpha, 0.0) / n_terms   # d/d(u entries)
    coef_b = np.where(live, alpha / safe_beta, 0.0) / n_terms   # d/d(v entries)
    d_u = coef_a[:, :, None] * u
    d_q = np.einsum("hbm,hbmk->hbk", d_u, v)
    d_v = np.einsum("hbm,hbk->hbmk", d_u, q) + coef_b[:, :, None, None] * v
    return r_mean, d_q, d_v


# ---------------------------------------------------------------------------
# edge decoder
# ---------------------------------------------------------------------------

@dataclass
class DecoderParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray  # shape () scalar


def init_decoder_params(d_emb: int, rng: np.random.Generator) -> DecoderParams:
    d_hid = d_emb
    lim1 = np.sqrt(6.0 / (2 * d_emb + d_hid))
    lim2 = np.sqrt(6.0 / (d_hid + 1))
    return DecoderParams(
        w1=rng.uniform(-lim1, lim1, size=(2 * d_emb, d_hid)),
        b1=np.zeros(d_hid),
        w2=rng.uniform(-lim2, lim2, size=d_hid),
        b2=np.zeros(()),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class DecoderCache:
    x: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def decoder_forward(src_emb: np.ndarray, dst_emb: np.ndarray, dec: DecoderParams):
    """Score endpoint pairs: relu hidden layer on the concatenation, sigmoid out."""
    if src_emb.shape != dst_emb.shape:
        raise DimensionError(
            f"embedding shapes differ: {src_emb.shape} vs {dst_emb.shape}"
        )
    x = np.concatenate([src_emb, dst_emb], axis=1)
    pre = x @ dec.w1 + dec.b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ dec.w2 + dec.b2
    probs = _sigmoid(logits)
    return probs, DecoderCache(x=x, hidden=hidden, logits=logits, probs=probs)


@dataclass
class DecoderGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def decoder_backward(cache: DecoderCache, d_logits: np.ndarray, dec: DecoderParams):
    d_hidden = np.outer(d_logits, dec.w2) * (cache.hidden > 0)
    grads = DecoderGrads(
        w1=cache.x.T @ d_hidden,
        b1=d_hidden.sum(axis=0),
        w2=cache.hidden.T @ d_logits,
        b2=np.asarray(d_logits.sum()),
    )
    d_x = d_hidden @ dec.w1.T
    d = d_x.shape[1] // 2
    return grads, d_x[:, :d], d_x[:, d:]


def predict_edge(src_emb, dst_emb, dec: DecoderParams) -> float:
    """Probability that the edge (src, dst) exists, from their embeddings."""
    src = np.asarray(src_emb, dtype=np.float64).reshape(1, -1)
    dst = np.asarray(dst_emb, dtype=np.float64).reshape(1, -1)
    probs, _ = decoder_forward(src, dst, dec)
    return float(probs[0])


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    attention: AttentionParams
    gru: GruParams
    decoder: DecoderParams

    def flatten(self) -> dict:
        """Name→array view of every trainable matrix (live references)."""
        a, g, d = self.attention, self.gru, self.decoder
        return {
            "att.mq": a.mq, "att.mk": a.mk, "att.mv": a.mv, "att.w0": a.w0,
            "att.time_omega": a.time_omega, "att.time_bias": a.time_bias,
            "gru.w_z": g.w_z, "gru.u_z": g.u_z, "gru.b_z": g.b_z,
            "gru.w_r": g.w_r, "gru.u_r": g.u_r, "gru.b_r": g.b_r,
            "gru.w_h": g.w_h, "gru.u_h": g.u_h, "gru.b_h": g.b_h,
            "dec.w1": d.w1, "dec.b1": d.b1, "dec.w2": d.w2, "dec.b2": d.b2,
        }

    def copy(self) -> "ModelParams":
        att = replace(
            self.attention,
            mq=self.attention.mq.copy(), mk=self.attention.mk.copy(),
            mv=self.attention.mv.copy(), w0=self.attention.w0.copy(),
            time_omega=self.attention.time_omega.copy(),
            time_bias=self.attention.time_bias.copy(),
        )
        gru = GruParams(**{k: getattr(self.gru, k).copy()
                           for k in self.gru.__dataclass_fields__})
        dec = DecoderParams(w1=self.decoder.w1.copy(), b1=self.decoder.b1.copy(),
                            w2=self.decoder.w2.copy(), b2=self.decoder.b2.copy())
        return ModelParams(att, gru, dec)


def init_model_params(cfg: TrainConfig, d_e: int, rng: np.random.Generator | None = None) -> ModelParams:
    cfg.validate()
    rng = rng or np.random.default_rng(cfg.seed)
    attention = init_attention_params(
        d_mem=cfg.d_mem, d_e=d_e, d_time=cfg.d_time, d_k=cfg.d_k,
        n_heads=cfg.h, d_emb=cfg.d_emb, dropout_rate=cfg.dropout_rate, rng=rng,
    )
    d_msg = 2 * cfg.d_mem + cfg.d_time + d_e
    gru = init_gru_params(d_msg, cfg.d_mem, rng)
    decoder = init_decoder_params(cfg.d_emb, rng)
    return ModelParams(attention, gru, decoder)


def adam_step(param, grad, m, v, t: int, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS):
    """One bias-corrected moment update; returns (param, m, v) as new arrays."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Keyed Adam over a dict of parameter arrays, updating them in place."""

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params_flat: dict, grads_flat: dict) -> None:
        self.t += 1
        for key, p in params_flat.items():
            g = grads_flat[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            new_p, self.m[key], self.v[key] = adam_step(
                p, g, self.m[key], self.v[key], self.t, self.lr
            )
            p[...] = new_p


# ---------------------------------------------------------------------------
# one optimization step
# ---------------------------------------------------------------------------

def _zero_grads(params: ModelParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.flatten().items()}


def _effective_c(cfg: TrainConfig, params: AttentionParams) -> float:
    if cfg.a3_form == "affine" and cfg.lambda_a3 == 0.0:
        return 1.0
    n_input = params.d_kv_in
    return a3_scale(cfg.m, n_input, cfg.lambda_a3, form=cfg.a3_form)


def _embed_targets(node_ids, t_query, mem, index, params, cfg, dropout_mask):
    """Batched embedding of (node, time) targets from current memory."""
    big = len(node_ids)
    m = cfg.m
    d_mem, d_e = cfg.d_mem, params.d_kv_in - cfg.d_mem - cfg.d_time
    states_q = mem.state[node_ids]
    nbr_ids = np.zeros((big, m), dtype=np.int64)
    nbr_feats = np.zeros((big, m, d_e))
    dt_k = np.zeros((big, m))
    mask = np.zeros((big, m), dtype=bool)
    fallback = np.zeros(big, dtype=bool)
    for i in range(big):
        entries = index.query(int(node_ids[i]), float(t_query[i]), m)
        if not entries:
            nbr_ids[i, 0] = node_ids[i]
            mask[i, 0] = True
            fallback[i] = True
            continue
        for j, (partner, feat, te, _seq) in enumerate(entries):
            nbr_ids[i, j] = partner
            nbr_feats[i, j] = feat
            dt_k[i, j] = t_query[i] - te
            mask[i, j] = True
    nbr_states = mem.state[nbr_ids]
    nbr_states = np.where(mask[:, :, None], nbr_states, 0.0)
    c = _effective_c(cfg, params)
    emb, cache = attention_forward_batch(
        states_q, np.zeros(big), nbr_states, nbr_feats, dt_k, mask,
        params, c=c, dropout_mask=dropout_mask, self_fallback=fallback,
    )
    return emb, cache, nbr_ids


@dataclass
class StepResult:
    loss: float
    probs: np.ndarray
    labels: np.ndarray
    grads: dict | None = None


def run_step(
    batch: Batch,
    negatives: np.ndarray,
    mem: NodeMemory,
    index,
    params: ModelParams,
    cfg: TrainConfig,
    dropout_mask: np.ndarray | None = None,
    with_grads: bool = True,
    in_place: bool = True,
) -> StepResult:
    """Flush staged messages, embed, score, and (optionally) backpropagate.

    Mutates ``mem`` (flush) unless ``in_place=False``; never touches the
    staged buffer of the batch itself, the optimizer, or the neighbor index.
    """
    events = batch.events
    b = len(events)
    att = params.attention

    mem, flush_cache = flush_and_apply(
        mem, params.gru, att.time_omega, att.time_bias,
        aggregator=cfg.aggregator, in_place=in_place,
    )

    targets = np.concatenate([events.src, events.dst, negatives])
    t_query = np.concatenate([events.t, events.t, events.t])
    emb, att_cache, nbr_ids = _embed_targets(
        targets, t_query, mem, index, att, cfg, dropout_mask
    )
    src_emb, dst_emb, neg_emb = emb[:b], emb[b:2 * b], emb[2 * b:]

    probs_pos, cache_pos = decoder_forward(src_emb, dst_emb, params.decoder)
    probs_neg, cache_neg = decoder_forward(src_emb, neg_emb, params.decoder)
    probs = np.concatenate([probs_pos, probs_neg])
    labels = np.concatenate([np.ones(b), np.zeros(b)])

    bce = bce_loss(probs, labels)
    apply_tlr = cfg.lambda_tlr > 0.0
    if apply_tlr:
        r_mean, d_q_tlr, d_v_tlr = _tlr_batch_terms(att_cache.q, att_cache.v)
        loss = total_loss(bce, r_mean, cfg.lambda_tlr)
    else:
        loss = bce

    if not with_grads:
        return StepResult(loss=loss, probs=probs, labels=labels)

    grads = _zero_grads(params)
    d_logits = _bce_dlogit(probs, labels)
    dec_pos, d_src_pos, d_dst = decoder_backward(cache_pos, d_logits[:b], params.decoder)
    dec_neg, d_src_neg, d_neg = decoder_backward(cache_neg, d_logits[b:], params.decoder)
    for name, g1, g2 in (
        ("dec.w1", dec_pos.w1, dec_neg.w1), ("dec.b1", dec_pos.b1, dec_neg.b1),
        ("dec.w2", dec_pos.w2, dec_neg.w2), ("dec.b2", dec_pos.b2, dec_neg.b2),
    ):
        grads[name] += g1 + g2

    d_emb = np.concatenate([d_src_pos + d_src_neg, d_dst, d_neg], axis=0)
    att_grads = attention_backward(
        att_cache,
        d_emb,
        d_q_extra=cfg.lambda_tlr * d_q_tlr if apply_tlr else None,
        d_v_extra=cfg.lambda_tlr * d_v_tlr if apply_tlr else None,
    )
    grads["att.mq"] += att_grads.mq
    grads["att.mk"] += att_grads.mk
    grads["att.mv"] += att_grads.mv
    grads["att.w0"] += att_grads.w0
    grads["att.time_omega"] += att_grads.time_omega
    grads["att.time_bias"] += att_grads.time_bias

    # Route state gradients to nodes, then through this step's flush.
    d_state = np.zeros_like(mem.state)
    np.add.at(d_state, targets, att_grads.d_states_q)
    np.add.at(d_state, nbr_ids.ravel(),
              att_grads.d_nbr_states.reshape(-1, cfg.d_mem))
    if flush_cache is not None:
        d_flushed = d_state[flush_cache.nodes]
        gru_grads, d_omega, d_bias = flush_backward(flush_cache, d_flushed, params.gru)
        for gate in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"):
            grads[f"gru.{gate}"] += getattr(gru_grads, gate)
        grads["att.time_omega"] += d_omega
        grads["att.time_bias"] += d_bias

    return StepResult(loss=loss, probs=probs, labels=labels, grads=grads)


def loss_for_params(batch, negatives, mem, index, params, cfg) -> float:
    """Pure step loss (no mutation, no dropout); finite-difference target."""
    result = run_step(
        batch, negatives, mem.copy(), index, params, cfg,
        dropout_mask=None, with_grads=False, in_place=True,
    )
    return result.loss


def grads_for_params(batch, negatives, mem, index, params, cfg) -> dict:
    """Analytic counterpart of :func:`loss_for_params`."""
    result = run_step(
        batch, negatives, mem.copy(), index, params, cfg,
        dropout_mask=None, with_grads=True, in_place=True,
    )
    return result.grads


# ---------------------------------------------------------------------------
# ranking metrics
# ---------------------------------------------------------------------------

def _check_labels(labels: np.ndarray) -> None:
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise UndefinedMetricError(
            "metric undefined: need at least one positive and one negative"
        )


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks of the positives (descending scores).

    Tied scores keep their original sequence order (stable sort), matching
    the streaming setting where scores arrive in event order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    check_same_length(scores, labels, "scores", "labels")
    _check_labels(labels)
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    cum = np.cumsum(hits)
    prec_at_k = cum / np.arange(1, len(hits) + 1)
    return float(np.sum(prec_at_k * hits) / hits.sum())


def roc_auc(scores, labels) -> float:
    """Pairwise ranking statistic with half credit for tied scores."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    check_same_length(scores, labels, "scores", "labels")
    _check_labels(labels)
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# epoch loops
# ---------------------------------------------------------------------------

def _dropout_mask(rng: np.random.Generator, shape, rate: float):
    if rate == 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _neg_seed(cfg: TrainConfig, epoch: int, batch_index: int, purpose: int):
    return [cfg.seed & 0x7FFFFFFF, epoch, batch_index, purpose]


def train_epoch(
    stream: EventStream,
    mem: NodeMemory,
    params: ModelParams,
    cfg: TrainConfig,
    index,
    optimizer: Adam,
    dst_universe: np.ndarray,
    epoch: int = 0,
) -> Metrics:
    """One pass over ``stream``: per-batch scoring, update, and staging.

    Scores are collected before each parameter update, so the reported
    ranking metrics reflect one-step-ahead prediction over the whole epoch.
    """
    t0 = time.perf_counter()
    all_scores, all_labels = [], []
    total_loss_value = 0.0
    flat = params.flatten()
    for batch in make_batches(stream, cfg.batch_size):
        negs = sample_negatives(
            batch, dst_universe, seed=_neg_seed(cfg, epoch, batch.index, 0)
        )
        drop_rng = np.random.default_rng(_neg_seed(cfg, epoch, batch.index, 1))
        mask = _dropout_mask(
            drop_rng, (3 * len(batch), cfg.d_emb), cfg.dropout_rate
        )
        result = run_step(
            batch, negs, mem, index, params, cfg,
            dropout_mask=mask, with_grads=True, in_place=True,
        )
        optimizer.step(flat, result.grads)
        mem.stage_events(batch.events)
        index.insert_events(batch.events)
        all_scores.append(result.probs)
        all_labels.append(result.labels)
        total_loss_value += result.loss
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    return Metrics(
        ap=average_precision(scores, labels),
        auc=roc_auc(scores, labels),
        loss=total_loss_value,
        epoch_time_s=time.perf_counter() - t0,
    )


def evaluate(
    stream: EventStream,
    mem: NodeMemory,
    params: ModelParams,
    cfg: TrainConfig,
    index,
    dst_universe: np.ndarray,
    split_tag: int = 0,
) -> Metrics:
    """Score a stream without updating parameters.

    Memory must already be warmed through all earlier events; it keeps
    advancing here with the ground-truth events of ``stream`` (standard
    streaming evaluation). No dropout.
    """
    t0 = time.perf_counter()
    all_scores, all_labels = [], []
    total_loss_value = 0.0
    for batch in make_batches(stream, cfg.batch_size):
        negs = sample_negatives(
            batch, dst_universe,
            seed=[cfg.seed & 0x7FFFFFFF, 0x0E7A1, split_tag, batch.index],
        )
        result = run_step(
            batch, negs, mem, index, params, cfg,
            dropout_mask=None, with_grads=False, in_place=True,
        )
        mem.stage_events(batch.events)
        index.insert_events(batch.events)
        all_scores.append(result.probs)
        all_labels.append(result.labels)
        total_loss_value += result.loss
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    return Metrics(
        ap=average_precision(scores, labels),
        auc=roc_auc(scores, labels),
        loss=total_loss_value,
        epoch_time_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train: Metrics
    val: Metrics | None
    test: Metrics | None


@dataclass
class TrainResult:
    params: ModelParams
    memory: NodeMemory          # snapshot right after the final training pass
    history: list = field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        return self.history[-1]


def run_training(
    train: EventStream,
    val: EventStream | None,
    test: EventStream | None,
    cfg: TrainConfig,
    dst_universe: np.ndarray | None = None,
    on_epoch=None,
) -> TrainResult:
    """Full protocol: per epoch, reset and re-warm memory by replaying the
    training stream with updates, flush, then stream through val and test.

    The negative-destination universe defaults to all destinations across
    the provided splits. The returned memory snapshot is taken after the
    final epoch's training pass (before evaluation advanced it).
    """
    cfg.validate()
    if dst_universe is None:
        parts = [s.dst for s in (train, val, test) if s is not None and len(s)]
        dst_universe = np.unique(np.concatenate(parts))
    rng = np.random.default_rng(cfg.seed)
    params = init_model_params(cfg, d_e=train.d_e, rng=rng)
    optimizer = Adam(cfg.lr)
    mem = NodeMemory(train.n_nodes, cfg.d_mem)
    index = NeighborIndex(train.n_nodes)
    att = params.attention

    history = []
    snapshot = None
    for epoch in range(cfg.epochs):
        mem.reset()
        index.reset()
        tm = train_epoch(train, mem, params, cfg, index, optimizer, dst_universe, epoch)
        flush_and_apply(mem, params.gru, att.time_omega, att.time_bias,
                        aggregator=cfg.aggregator)
        if epoch == cfg.epochs - 1:
            snapshot = mem.copy()
        vm = (
            evaluate(val, mem, params, cfg, index, dst_universe, split_tag=1)
            if val is not None and len(val)
            else None
        )
        em = (
            evaluate(test, mem, params, cfg, index, dst_universe, split_tag=2)
            if test is not None and len(test)
            else None
        )
        record = EpochRecord(epoch=epoch, train=tm, val=vm, test=em)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(params=params, memory=snapshot, history=history)
