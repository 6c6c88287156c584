"""Per-node memory updated from interaction messages, with staged delivery.

A batch's raw messages are staged and only folded into memory right before
the *next* batch is processed, so no prediction ever sees its own event.
With batch size 1 this reproduces strict one-event-at-a-time processing
exactly. Single-writer: one training loop mutates a :class:`NodeMemory`;
reads from other threads are safe only between batch boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import time_encode_backward, time_encode_batch
from .events import Event, EventStream
from .exceptions import ConfigError, DimensionError, TemporalOrderError
from .validation import check_positive_int


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# gated recurrent update
# ---------------------------------------------------------------------------

@dataclass
class GruParams:
    """Gate weights, message side (w_*: d_msg×d_mem) and state side (u_*: d_mem×d_mem)."""

    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_h: np.ndarray
    u_h: np.ndarray
    b_h: np.ndarray

    @property
    def d_msg(self) -> int:
        return self.w_z.shape[0]

    @property
    def d_mem(self) -> int:
        return self.w_z.shape[1]

    def validate(self) -> None:
        d_msg, d_mem = self.w_z.shape
        for name in ("w_z", "w_r", "w_h"):
            if getattr(self, name).shape != (d_msg, d_mem):
                raise DimensionError(f"{name} shape mismatch")
        for name in ("u_z", "u_r", "u_h"):
            if getattr(self, name).shape != (d_mem, d_mem):
                raise DimensionError(f"{name} shape mismatch")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (d_mem,):
                raise DimensionError(f"{name} shape mismatch")


def init_gru_params(d_msg: int, d_mem: int, rng: np.random.Generator | None = None) -> GruParams:
    rng = rng or np.random.default_rng(0)
    lim_w = np.sqrt(6.0 / (d_msg + d_mem))
    lim_u = np.sqrt(6.0 / (2 * d_mem))
    mk_w = lambda: rng.uniform(-lim_w, lim_w, size=(d_msg, d_mem))
    mk_u = lambda: rng.uniform(-lim_u, lim_u, size=(d_mem, d_mem))
    return GruParams(
        w_z=mk_w(), u_z=mk_u(), b_z=np.zeros(d_mem),
        w_r=mk_w(), u_r=mk_u(), b_r=np.zeros(d_mem),
        w_h=mk_w(), u_h=mk_u(), b_h=np.zeros(d_mem),
    )


@dataclass
class GruCache:
    states: np.ndarray
    msgs: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h_tilde: np.ndarray


@dataclass
class GruGrads:
    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_h: np.ndarray
    u_h: np.ndarray
    b_h: np.ndarray


def gru_forward(states: np.ndarray, msgs: np.ndarray, p: GruParams):
    """Batched gate update over rows; returns (new_states, cache)."""
    if states.ndim != 2 or msgs.ndim != 2:
        raise DimensionError("gru_forward expects 2-D (rows of states/messages)")
    if msgs.shape[1] != p.d_msg or states.shape[1] != p.d_mem:
        raise DimensionError(
            f"message dim {msgs.shape[1]} / state dim {states.shape[1]} "
            f"do not match parameters ({p.d_msg}, {p.d_mem})"
        )
    z = _sigmoid(msgs @ p.w_z + states @ p.u_z + p.b_z)
    r = _sigmoid(msgs @ p.w_r + states @ p.u_r + p.b_r)
    h_tilde = np.tanh(msgs @ p.w_h + (r * states) @ p.u_h + p.b_h)
    new_states = (1.0 - z) * states + z * h_tilde
    return new_states, GruCache(states=states, msgs=msgs, z=z, r=r, h_tilde=h_tilde)


def gru_update(state, msg, p: GruParams) -> np.ndarray:
    """Single-vector or batched gate update; pure function."""
    state = np.asarray(state, dtype=np.float64)
    msg = np.asarray(msg, dtype=np.float64)
    single = state.ndim == 1
    if single:
        state = state[None, :]
        msg = msg[None, :]
    out, _ = gru_forward(state, msg, p)
    return out[0] if single else out


def gru_backward(cache: GruCache, d_new: np.ndarray, p: GruParams):
    """Gradients of the gate update: parameter grads, d_msg, d_old_state."""
    s, msgs, z, r, h = cache.states, cache.msgs, cache.z, cache.r, cache.h_tilde
    d_z = d_new * (h - s)
    d_h = d_new * z
    d_s = d_new * (1.0 - z)

    d_h_pre = d_h * (1.0 - h * h)
    d_rs = d_h_pre @ p.u_h.T
    d_r = d_rs * s
    d_s = d_s + d_rs * r

    d_r_pre = d_r * r * (1.0 - r)
    d_z_pre = d_z * z * (1.0 - z)
    d_s = d_s + d_r_pre @ p.u_r.T + d_z_pre @ p.u_z.T

    grads = GruGrads(
        w_z=msgs.T @ d_z_pre, u_z=s.T @ d_z_pre, b_z=d_z_pre.sum(axis=0),
        w_r=msgs.T @ d_r_pre, u_r=s.T @ d_r_pre, b_r=d_r_pre.sum(axis=0),
        w_h=msgs.T @ d_h_pre, u_h=(r * s).T @ d_h_pre, b_h=d_h_pre.sum(axis=0),
    )
    d_msg = d_z_pre @ p.w_z.T + d_r_pre @ p.w_r.T + d_h_pre @ p.w_h.T
    return grads, d_msg, d_s


# ---------------------------------------------------------------------------
# node memory and message staging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RawMessage:
    """One endpoint's view of an interaction, kept until the next flush."""

    t: float
    seq: int
    partner: int
    feat: np.ndarray


class NodeMemory:
    """State vector and last-update time per node, plus staged raw messages."""

    def __init__(self, n_nodes: int, d_mem: int):
        self.n_nodes = n_nodes
        self.d_mem = d_mem
        self.state = np.zeros((n_nodes, d_mem))
        self.last_update = np.zeros(n_nodes)
        self.staged: dict[int, list[RawMessage]] = {}

    def reset(self) -> None:
        self.state.fill(0.0)
        self.last_update.fill(0.0)
        self.staged.clear()

    def copy(self) -> "NodeMemory":
        dup = NodeMemory(self.n_nodes, self.d_mem)
        dup.state = self.state.copy()
        dup.last_update = self.last_update.copy()
        dup.staged = {k: list(v) for k, v in self.staged.items()}
        return dup

    def stage_events(self, stream: EventStream) -> None:
        """Buffer both endpoints' raw messages for every event in the slice."""
        for i in range(len(stream)):
            u = int(stream.src[i])
            v = int(stream.dst[i])
            t = float(stream.t[i])
            seq = int(stream.seq[i])
            feat = stream.feat[i]
            self.staged.setdefault(u, []).append(RawMessage(t, seq, v, feat))
            self.staged.setdefault(v, []).append(RawMessage(t, seq, u, feat))

    def arrays(self) -> dict:
        return {"memory_state": self.state, "memory_last_update": self.last_update}

    @classmethod
    def from_arrays(cls, state: np.ndarray, last_update: np.ndarray) -> "NodeMemory":
        mem = cls(state.shape[0], state.shape[1])
        mem.state = np.array(state, dtype=np.float64)
        mem.last_update = np.array(last_update, dtype=np.float64)
        return mem


def compute_message(event: Event, mem: NodeMemory, time_enc):
    """Message vectors for both endpoints of one event.

    For the source: ``[s_src, s_dst, time_enc(t - last_update_src), feat]``;
    symmetric for the destination. Total length 2*d_mem + d_time + d_e.
    """
    for node in (event.src, event.dst):
        if event.t < mem.last_update[node]:
            raise TemporalOrderError(
                f"event at t={event.t} precedes node {node} last update "
                f"{mem.last_update[node]}"
            )
    s_src = mem.state[event.src]
    s_dst = mem.state[event.dst]
    msg_src = np.concatenate(
        [s_src, s_dst, time_enc(event.t - mem.last_update[event.src]), event.feat]
    )
    msg_dst = np.concatenate(
        [s_dst, s_src, time_enc(event.t - mem.last_update[event.dst]), event.feat]
    )
    return msg_src, msg_dst


def aggregate_messages(messages: list[RawMessage]) -> RawMessage:
    """Most-recent rule: keep the message with the largest (t, seq)."""
    if not messages:
        raise ConfigError("aggregate_messages needs at least one staged message")
    return max(messages, key=lambda msg: (msg.t, msg.seq))


@dataclass
class FlushCache:
    """Everything needed to backpropagate one flush (one gate step per node)."""

    nodes: np.ndarray           # (N,) flushed node ids
    pre_states: np.ndarray      # (N, d_mem) states before the flush
    gru_cache: GruCache
    row_node: np.ndarray        # (R,) which flushed node each message row feeds
    row_weight: np.ndarray      # (R,) 1 for most-recent, 1/k for mean
    dts: np.ndarray             # (R,)
    phase: np.ndarray           # (R, d_time)
    d_mem: int
    d_time: int

    def node_positions(self) -> dict:
        return {int(n): i for i, n in enumerate(self.nodes)}


def flush_and_apply(
    mem: NodeMemory,
    gru: GruParams,
    time_omega: np.ndarray,
    time_bias: np.ndarray,
    aggregator: str = "last",
    in_place: bool = True,
):
    """Fold staged messages into memory, one gate step per touched node.

    All message vectors are built from pre-flush states (deliberately: within
    one delivery, events do not see each other), then applied together.
    ``aggregator='last'`` keeps each node's most recent message;
    ``'mean'`` averages all of its staged message vectors and advances the
    clock to the latest one. Returns ``(memory, FlushCache | None)``; with
    ``in_place=False`` the input memory is left untouched.
    """
    if aggregator not in ("last", "mean"):
        raise ConfigError(f"unknown aggregator {aggregator!r}")
    if not in_place:
        mem = mem.copy()
    if not mem.staged:
        return mem, None

    nodes = sorted(mem.staged)
    d_mem = mem.d_mem
    rows_self, rows_partner, rows_dt, rows_feat = [], [], [], []
    row_node, row_weight = [], []
    new_t = np.empty(len(nodes))
    for pos, node in enumerate(nodes):
        staged = mem.staged[node]
        chosen = [aggregate_messages(staged)] if aggregator == "last" else staged
        new_t[pos] = max(msg.t for msg in chosen)
        w = 1.0 / len(chosen)
        for msg in chosen:
            dt = msg.t - mem.last_update[node]
            if dt < 0:
                raise TemporalOrderError(
                    f"staged message at t={msg.t} precedes node {node} "
                    f"last update {mem.last_update[node]}"
                )
            rows_self.append(mem.state[node])
            rows_partner.append(mem.state[msg.partner])
            rows_dt.append(dt)
            rows_feat.append(msg.feat)
            row_node.append(pos)
            row_weight.append(w)

    dts = np.asarray(rows_dt)
    codes, phase = time_encode_batch(dts, time_omega, time_bias)
    msg_rows = np.concatenate(
        [np.asarray(rows_self), np.asarray(rows_partner), codes, np.asarray(rows_feat)],
        axis=1,
    )
    row_node_arr = np.asarray(row_node, dtype=np.int64)
    weights = np.asarray(row_weight)

    agg = np.zeros((len(nodes), msg_rows.shape[1]))
    np.add.at(agg, row_node_arr, msg_rows * weights[:, None])

    node_arr = np.asarray(nodes, dtype=np.int64)
    pre_states = mem.state[node_arr]
    new_states, gru_cache = gru_forward(pre_states, agg, gru)

    mem.state[node_arr] = new_states
    mem.last_update[node_arr] = new_t
    mem.staged.clear()

    cache = FlushCache(
        nodes=node_arr,
        pre_states=pre_states,
        gru_cache=gru_cache,
        row_node=row_node_arr,
        row_weight=weights,
        dts=dts,
        phase=phase,
        d_mem=d_mem,
        d_time=time_omega.shape[0],
    )
    return mem, cache


def flush_backward(cache: FlushCache, d_new_states: np.ndarray, gru: GruParams):
    """Backward through one flush: gate-parameter and time-encoder gradients.

    ``d_new_states`` is aligned with ``cache.nodes``. States entering the
    flush are treated as constants (the gradient is truncated at the previous
    delivery boundary), so only gate and time-encoder parameters receive
    gradients.
    """
    grads, d_msg_agg, _ = gru_backward(cache.gru_cache, d_new_states, gru)
    d_rows = d_msg_agg[cache.row_node] * cache.row_weight[:, None]
    code_lo = 2 * cache.d_mem
    d_codes = d_rows[:, code_lo:code_lo + cache.d_time]
    d_omega, d_bias = time_encode_backward(cache.phase, cache.dts, d_codes)
    return grads, d_omega, d_bias
