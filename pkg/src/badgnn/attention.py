"""Temporal attention over a node's most recent neighbors.

One attention layer embeds a target node at time ``t`` from its own memory
state plus up to ``m`` most-recent prior interactions. Scores can be
sharpened by a multiplier ``c`` derived from the sequence length and input
feature dimension (:func:`a3_scale`); ``c == 1`` is the plain scaled
dot-product baseline, bit for bit.

The backward pass is hand-derived; :func:`badgnn.linalg.grad_check` verifies
it in the test suite.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .events import EventStream
from .exceptions import ConfigError, DimensionError, StateError, TemporalOrderError
from .linalg import row_softmax
from .validation import check_non_negative, check_positive_int

MASK_SENTINEL = -np.inf


# ---------------------------------------------------------------------------
# time encoding
# ---------------------------------------------------------------------------

def time_encode(dt: float, omega: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Cosine time code: ``cos(omega * dt + bias)``, entries in [-1, 1]."""
    if dt < 0:
        raise TemporalOrderError(f"negative time delta {dt}")
    omega = np.asarray(omega, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if omega.shape != bias.shape:
        raise DimensionError("omega and bias must have the same length")
    return np.cos(omega * dt + bias)


def time_encode_batch(dts: np.ndarray, omega: np.ndarray, bias: np.ndarray):
    """Vectorized :func:`time_encode`; returns (codes, phase) for backward."""
    dts = np.asarray(dts, dtype=np.float64)
    if dts.size and dts.min() < 0:
        raise TemporalOrderError(f"negative time delta {dts.min()}")
    phase = np.multiply.outer(dts, omega) + bias
    return np.cos(phase), phase


def time_encode_backward(phase: np.ndarray, dts: np.ndarray, d_codes: np.ndarray):
    """Gradients of cosine codes wrt omega and bias, summed over rows."""
    common = -np.sin(phase) * d_codes
    lead = common.reshape(-1, common.shape[-1])
    dts_flat = np.asarray(dts, dtype=np.float64).reshape(-1)
    d_omega = lead.T @ dts_flat
    d_bias = lead.sum(axis=0)
    return d_omega, d_bias


def default_time_omega(d_time: int) -> np.ndarray:
    """Geometric frequency ladder covering second-to-week time scales."""
    return 1.0 / np.power(10.0, np.linspace(0.0, 6.0, d_time))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Per-head projections, output projection, and time-encoder parameters.

    ``mq``: (h, d_q_in, d_k), ``mk``/``mv``: (h, d_kv_in, d_k) in the
    right-multiply convention (inputs are rows). ``w0``: (h*d_k, d_emb).
    """

    mq: np.ndarray
    mk: np.ndarray
    mv: np.ndarray
    w0: np.ndarray
    time_omega: np.ndarray
    time_bias: np.ndarray
    dropout_rate: float = 0.0

    @property
    def n_heads(self) -> int:
        return self.mq.shape[0]

    @property
    def d_k(self) -> int:
        return self.mq.shape[2]

    @property
    def d_q_in(self) -> int:
        return self.mq.shape[1]

    @property
    def d_kv_in(self) -> int:
        return self.mk.shape[1]

    @property
    def d_emb(self) -> int:
        return self.w0.shape[1]

    @property
    def d_time(self) -> int:
        return self.time_omega.shape[0]

    def validate(self) -> None:
        if self.d_k < 1:
            raise ConfigError("d_k must be >= 1")
        if self.mk.shape != self.mv.shape or self.mk.shape[0] != self.n_heads:
            raise DimensionError("mk/mv shapes inconsistent")
        if self.w0.shape[0] != self.n_heads * self.d_k:
            raise DimensionError(
                f"w0 expects input dim {self.n_heads * self.d_k}, has {self.w0.shape[0]}"
            )
        if self.time_omega.shape != self.time_bias.shape:
            raise DimensionError("time omega/bias length mismatch")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_attention_params(
    d_mem: int,
    d_e: int,
    d_time: int,
    d_k: int,
    n_heads: int,
    d_emb: int,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> AttentionParams:
    rng = rng or np.random.default_rng(0)
    d_q_in = d_mem + d_time
    d_kv_in = d_mem + d_e + d_time
    mq = glorot_uniform(rng, d_q_in, d_k, (n_heads, d_q_in, d_k))
    mk = glorot_uniform(rng, d_kv_in, d_k, (n_heads, d_kv_in, d_k))
    mv = glorot_uniform(rng, d_kv_in, d_k, (n_heads, d_kv_in, d_k))
    w0 = glorot_uniform(rng, n_heads * d_k, d_emb, (n_heads * d_k, d_emb))
    params = AttentionParams(
        mq=mq,
        mk=mk,
        mv=mv,
        w0=w0,
        time_omega=default_time_omega(d_time),
        time_bias=np.zeros(d_time),
        dropout_rate=dropout_rate,
    )
    params.validate()
    return params


# ---------------------------------------------------------------------------
# neighbor lookup
# ---------------------------------------------------------------------------

@dataclass
class NeighborContext:
    """Up to ``m`` most recent prior interactions of one node before time t.

    All neighbor event times are strictly before the target time. ``padded``
    is set when fewer than the requested ``m`` neighbors exist;
    ``self_fallback`` when there were none at all and the target's own state
    stands in as the single attended slot.
    """

    ids: np.ndarray
    states: np.ndarray
    feats: np.ndarray
    dt: np.ndarray
    padded: bool = False
    self_fallback: bool = False

    def __len__(self) -> int:
        return len(self.ids)


def neighbor_sample(
    node: int,
    t: float,
    m: int,
    history: EventStream,
    mem=None,
) -> NeighborContext:
    """The ``m`` most recent interactions of ``node`` strictly before ``t``.

    Reference implementation by full scan of the history prefix; ties in
    time break by ``seq``. ``mem`` (anything with a ``state`` table) fills
    neighbor memory states; zeros otherwise.
    """
    check_positive_int(m, "m")
    hits = []  # (t, seq, partner, feat_row)
    for i in range(len(history)):
        te = history.t[i]
        if te >= t:
            continue
        if history.src[i] == node:
            hits.append((te, int(history.seq[i]), int(history.dst[i]), i))
        elif history.dst[i] == node:
            hits.append((te, int(history.seq[i]), int(history.src[i]), i))
    hits.sort(key=lambda h: (h[0], h[1]))
    hits = hits[-m:]
    ids = np.array([h[2] for h in hits], dtype=np.int64)
    dt = np.array([t - h[0] for h in hits], dtype=np.float64)
    feats = (
        history.feat[[h[3] for h in hits]]
        if hits
        else np.zeros((0, history.d_e))
    )
    if mem is not None and len(ids):
        states = np.asarray(mem.state)[ids]
    else:
        d_mem = np.asarray(mem.state).shape[1] if mem is not None else 0
        states = np.zeros((0, d_mem))
    return NeighborContext(
        ids=ids, states=states, feats=feats, dt=dt, padded=len(hits) < m
    )


class NeighborIndex:
    """Append-only per-node interaction history for fast recency queries.

    Events must be inserted in stream order; each per-node list is then
    sorted by (t, seq) by construction. Queries return the latest ``m``
    entries strictly before ``t``.
    """

    def __init__(self, n_nodes: int):
        self.n_nodes = n_nodes
        self._times = [[] for _ in range(n_nodes)]
        self._entries = [[] for _ in range(n_nodes)]  # (partner, feat_row, t, seq)

    def insert_events(self, stream: EventStream) -> None:
        for i in range(len(stream)):
            u = int(stream.src[i])
            v = int(stream.dst[i])
            t = float(stream.t[i])
            seq = int(stream.seq[i])
            feat = stream.feat[i]
            self._times[u].append(t)
            self._entries[u].append((v, feat, t, seq))
            self._times[v].append(t)
            self._entries[v].append((u, feat, t, seq))

    def query(self, node: int, t: float, m: int):
        """Latest ``m`` entries of ``node`` with time strictly < ``t``."""
        hi = bisect.bisect_left(self._times[node], t)
        return self._entries[node][max(0, hi - m):hi]

    def reset(self) -> None:
        self._times = [[] for _ in range(self.n_nodes)]
        self._entries = [[] for _ in range(self.n_nodes)]

    def copy(self) -> "NeighborIndex":
        dup = NeighborIndex(self.n_nodes)
        dup._times = [list(ts) for ts in self._times]
        dup._entries = [list(es) for es in self._entries]
        return dup


# ---------------------------------------------------------------------------
# score sharpening
# ---------------------------------------------------------------------------

def a3_scale(m: int, n: int, lambda_a3: float, form: str = "affine") -> float:
    """Attention-logit multiplier from sequence length and input feature dim.

    ``affine`` (default): ``c = 1 + lambda_a3 * m * n`` so 0 recovers the
    baseline exactly and the strength scales continuously. ``pure``:
    ``c = m * n`` regardless of ``lambda_a3`` (the raw rescaling, equivalent
    to shrinking the key dimension by ``(m*n)**2``).
    """
    check_positive_int(m, "m")
    check_positive_int(n, "n")
    check_non_negative(lambda_a3, "lambda_a3")
    if form == "affine":
        if lambda_a3 == 0.0:
            return 1.0
        return 1.0 + lambda_a3 * m * n
    if form == "pure":
        return float(m * n)
    raise ConfigError(f"unknown a3 form {form!r}")


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class AttentionCache:
    """Intermediates kept by the forward pass for backward and diagnostics."""

    states_q: np.ndarray
    dt_q: np.ndarray
    nbr_states: np.ndarray
    nbr_feats: np.ndarray
    dt_k: np.ndarray
    mask: np.ndarray
    x_q: np.ndarray
    k_in: np.ndarray
    phase_q: np.ndarray
    phase_k: np.ndarray
    q: np.ndarray  # (h, B, d_k)
    k: np.ndarray  # (h, B, m, d_k)
    v: np.ndarray  # (h, B, m, d_k)
    weights: np.ndarray  # (h, B, m) softmax rows
    concat: np.ndarray  # (B, h*d_k)
    pre_dropout: np.ndarray
    dropout_mask: np.ndarray | None
    c: float
    params: AttentionParams
    self_fallback: np.ndarray  # (B,) bool


@dataclass
class AttentionGrads:
    mq: np.ndarray
    mk: np.ndarray
    mv: np.ndarray
    w0: np.ndarray
    time_omega: np.ndarray
    time_bias: np.ndarray
    d_states_q: np.ndarray
    d_nbr_states: np.ndarray
    d_nbr_feats: np.ndarray


def attention_forward_batch(
    states_q: np.ndarray,
    dt_q: np.ndarray,
    nbr_states: np.ndarray,
    nbr_feats: np.ndarray,
    dt_k: np.ndarray,
    mask: np.ndarray,
    params: AttentionParams,
    c: float = 1.0,
    dropout_mask: np.ndarray | None = None,
    self_fallback: np.ndarray | None = None,
):
    """Embed a batch of targets from their neighbor slots.

    Shapes: states_q (B, d_mem), dt_q (B,), nbr_states (B, m, d_mem),
    nbr_feats (B, m, d_e), dt_k (B, m), mask (B, m) with True marking real
    slots. Every row must have at least one real slot (use the self-fallback
    builder for cold nodes). Padded slots get exactly zero weight.
    """
    if c < 1.0:
        raise ConfigError(f"attention multiplier c must be >= 1, got {c}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise DimensionError("a target row has no attendable slot")
    b, m = mask.shape
    h, _, d_k = params.mq.shape

    code_q, phase_q = time_encode_batch(dt_q, params.time_omega, params.time_bias)
    code_k, phase_k = time_encode_batch(dt_k, params.time_omega, params.time_bias)
    x_q = np.concatenate([states_q, code_q], axis=1)
    k_in = np.concatenate([nbr_states, nbr_feats, code_k], axis=2)
    k_in = np.where(mask[:, :, None], k_in, 0.0)

    q = np.einsum("bi,hik->hbk", x_q, params.mq)
    k = np.einsum("bmi,hik->hbmk", k_in, params.mk)
    v = np.einsum("bmi,hik->hbmk", k_in, params.mv)

    logits = np.einsum("hbk,hbmk->hbm", q, k) / np.sqrt(d_k)
    if c != 1.0:
        logits = c * logits
    logits = np.where(mask[None, :, :], logits, MASK_SENTINEL)
    weights = row_softmax(logits.reshape(h * b, m)).reshape(h, b, m)

    heads = np.einsum("hbm,hbmk->hbk", weights, v)
    concat = np.moveaxis(heads, 0, 1).reshape(b, h * d_k)
    pre_dropout = concat @ params.w0
    out = pre_dropout if dropout_mask is None else pre_dropout * dropout_mask

    cache = AttentionCache(
        states_q=states_q,
        dt_q=np.asarray(dt_q, dtype=np.float64),
        nbr_states=nbr_states,
        nbr_feats=nbr_feats,
        dt_k=np.asarray(dt_k, dtype=np.float64),
        mask=mask,
        x_q=x_q,
        k_in=k_in,
        phase_q=phase_q,
        phase_k=phase_k,
        q=q,
        k=k,
        v=v,
        weights=weights,
        concat=concat,
        pre_dropout=pre_dropout,
        dropout_mask=dropout_mask,
        c=float(c),
        params=params,
        self_fallback=(
            np.zeros(b, dtype=bool) if self_fallback is None else self_fallback
        ),
    )
    return out, cache


def attention_backward(
    cache: AttentionCache | None,
    d_out: np.ndarray,
    d_q_extra: np.ndarray | None = None,
    d_v_extra: np.ndarray | None = None,
) -> AttentionGrads:
    """Exact reverse pass of :func:`attention_forward_batch`.

    ``d_q_extra`` (h, B, d_k) and ``d_v_extra`` (h, B, m, d_k) inject
    gradients that hit the projected queries/values directly (the
    query-value regularizer uses this), bypassing the embedding output.
    """
    if cache is None:
        raise StateError("attention_backward called without a forward cache")
    params = cache.params
    h, b, d_k = cache.q.shape
    m = cache.mask.shape[1]
    d_mem = cache.states_q.shape[1]
    d_e = cache.nbr_feats.shape[2]

    d_pre = d_out if cache.dropout_mask is None else d_out * cache.dropout_mask
    d_w0 = cache.concat.T @ d_pre
    d_concat = d_pre @ params.w0.T
    d_heads = np.moveaxis(d_concat.reshape(b, h, d_k), 1, 0)

    s = cache.weights
    d_weights = np.einsum("hbk,hbmk->hbm", d_heads, cache.v)
    d_v = np.einsum("hbm,hbk->hbmk", s, d_heads)

    # softmax jacobian, then the multiplier and 1/sqrt(d_k) of the raw scores
    inner = np.sum(d_weights * s, axis=2, keepdims=True)
    d_logits = s * (d_weights - inner)
    d_raw = d_logits * (cache.c / np.sqrt(d_k))

    d_q = np.einsum("hbm,hbmk->hbk", d_raw, cache.k)
    d_kmat = np.einsum("hbm,hbk->hbmk", d_raw, cache.q)

    if d_q_extra is not None:
        d_q = d_q + d_q_extra
    if d_v_extra is not None:
        d_v = d_v + d_v_extra

    d_mq = np.einsum("bi,hbk->hik", cache.x_q, d_q)
    d_mk = np.einsum("bmi,hbmk->hik", cache.k_in, d_kmat)
    d_mv = np.einsum("bmi,hbmk->hik", cache.k_in, d_v)

    d_x_q = np.einsum("hbk,hik->bi", d_q, params.mq)
    d_k_in = np.einsum("hbmk,hik->bmi", d_kmat, params.mk)
    d_k_in += np.einsum("hbmk,hik->bmi", d_v, params.mv)
    d_k_in = np.where(cache.mask[:, :, None], d_k_in, 0.0)

    d_states_q = d_x_q[:, :d_mem]
    d_code_q = d_x_q[:, d_mem:]
    d_nbr_states = d_k_in[:, :, :d_mem]
    d_nbr_feats = d_k_in[:, :, d_mem:d_mem + d_e]
    d_code_k = d_k_in[:, :, d_mem + d_e:]

    d_omega_q, d_bias_q = time_encode_backward(cache.phase_q, cache.dt_q, d_code_q)
    d_omega_k, d_bias_k = time_encode_backward(cache.phase_k, cache.dt_k, d_code_k)

    return AttentionGrads(
        mq=d_mq,
        mk=d_mk,
        mv=d_mv,
        w0=d_w0,
        time_omega=d_omega_q + d_omega_k,
        time_bias=d_bias_q + d_bias_k,
        d_states_q=d_states_q,
        d_nbr_states=d_nbr_states,
        d_nbr_feats=d_nbr_feats,
    )


def build_context_batch(
    states_q: np.ndarray,
    contexts,
    m: int,
    d_mem: int,
    d_e: int,
):
    """Stack per-target :class:`NeighborContext` objects into padded arrays.

    Cold targets (empty context) attend to themselves: state copied, zero
    features, zero time delta, flagged in the returned ``self_fallback``.
    """
    b = len(contexts)
    nbr_states = np.zeros((b, m, d_mem))
    nbr_feats = np.zeros((b, m, d_e))
    dt_k = np.zeros((b, m))
    mask = np.zeros((b, m), dtype=bool)
    fallback = np.zeros(b, dtype=bool)
    for i, ctx in enumerate(contexts):
        k = len(ctx)
        if k == 0:
            nbr_states[i, 0] = states_q[i]
            mask[i, 0] = True
            fallback[i] = True
            continue
        nbr_states[i, :k] = ctx.states
        nbr_feats[i, :k] = ctx.feats
        dt_k[i, :k] = ctx.dt
        mask[i, :k] = True
    return nbr_states, nbr_feats, dt_k, mask, fallback


def attention_forward(
    state: np.ndarray,
    ctx: NeighborContext,
    params: AttentionParams,
    c: float = 1.0,
):
    """Embed a single target node from its neighbor context.

    Returns ``(embedding, cache)``; ``cache.self_fallback[0]`` tells whether
    the empty-context fallback fired. Evaluation mode (no dropout).
    """
    state = np.asarray(state, dtype=np.float64)
    d_mem = state.shape[0]
    d_e = params.d_kv_in - d_mem - params.d_time
    if d_e < 0:
        raise DimensionError("state dimension inconsistent with parameters")
    m = max(1, len(ctx))
    nbr_states, nbr_feats, dt_k, mask, fallback = build_context_batch(
        state[None, :], [ctx], m=m, d_mem=d_mem, d_e=d_e
    )
    out, cache = attention_forward_batch(
        state[None, :],
        np.zeros(1),
        nbr_states,
        nbr_feats,
        dt_k,
        mask,
        params,
        c=c,
        self_fallback=fallback,
    )
    return out[0], cache
