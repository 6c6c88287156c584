"""Interaction event streams: CSV ingestion, splits, batches, negatives.

Streams are stored column-wise (numpy arrays) for speed; single events are
materialized on demand. A stream is immutable after construction and can be
shared freely across threads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ParseError, SchemaError
from .validation import check_fraction, check_positive_int


@dataclass(frozen=True)
class Event:
    """One timestamped source→destination interaction."""

    src: int
    dst: int
    t: float
    feat: np.ndarray
    label: float
    seq: int


class EventStream:
    """A chronologically sorted sequence of interaction events.

    Events are ordered by ``(t, seq)`` where ``seq`` is the original file
    position; ties in ``t`` keep file order. All node ids are < ``n_nodes``.
    """

    __slots__ = ("src", "dst", "t", "label", "feat", "seq", "n_nodes", "d_e")

    def __init__(self, src, dst, t, label, feat, seq, n_nodes, d_e, validate=True):
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.t = np.asarray(t, dtype=np.float64)
        self.label = np.asarray(label, dtype=np.float64)
        self.feat = np.asarray(feat, dtype=np.float64)
        self.seq = np.asarray(seq, dtype=np.int64)
        self.n_nodes = int(n_nodes)
        self.d_e = int(d_e)
        if validate:
            self._check_invariants()

    def _check_invariants(self):
        m = len(self.src)
        for name in ("dst", "t", "label", "seq"):
            if len(getattr(self, name)) != m:
                raise SchemaError(f"column {name} has length {len(getattr(self, name))}, expected {m}")
        if self.feat.shape != (m, self.d_e):
            raise SchemaError(f"feature block shape {self.feat.shape} != ({m}, {self.d_e})")
        if m:
            if self.src.min() < 0 or self.dst.min() < 0:
                raise SchemaError("negative node id")
            if max(self.src.max(), self.dst.max()) >= self.n_nodes:
                raise SchemaError("node id >= n_nodes")
            order = np.lexsort((self.seq, self.t))
            if not np.array_equal(order, np.arange(m)):
                raise SchemaError("events not sorted by (t, seq)")

    def __len__(self) -> int:
        return len(self.src)

    def __getitem__(self, i: int) -> Event:
        return Event(
            src=int(self.src[i]),
            dst=int(self.dst[i]),
            t=float(self.t[i]),
            feat=self.feat[i],
            label=float(self.label[i]),
            seq=int(self.seq[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def slice(self, start: int, stop: int) -> "EventStream":
        """View of events [start, stop); shares the underlying arrays."""
        return EventStream(
            self.src[start:stop],
            self.dst[start:stop],
            self.t[start:stop],
            self.label[start:stop],
            self.feat[start:stop],
            self.seq[start:stop],
            self.n_nodes,
            self.d_e,
            validate=False,
        )

    def destinations(self) -> np.ndarray:
        """Sorted unique destination ids seen in this stream."""
        return np.unique(self.dst)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.n_nodes == other.n_nodes
            and self.d_e == other.d_e
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.label, other.label)
            and np.array_equal(self.feat, other.feat)
            and np.array_equal(self.seq, other.seq)
        )


def concat_streams(parts) -> EventStream:
    """Concatenate consecutive stream slices back into one stream."""
    parts = list(parts)
    if not parts:
        raise ConfigError("nothing to concatenate")
    first = parts[0]
    return EventStream(
        np.concatenate([p.src for p in parts]),
        np.concatenate([p.dst for p in parts]),
        np.concatenate([p.t for p in parts]),
        np.concatenate([p.label for p in parts]),
        np.vstack([p.feat for p in parts]),
        np.concatenate([p.seq for p in parts]),
        first.n_nodes,
        first.d_e,
    )


@dataclass(frozen=True)
class Batch:
    """A contiguous slice of a stream, identified by its ordinal."""

    events: EventStream
    index: int

    def __len__(self) -> int:
        return len(self.events)


def load_jodie_csv(path) -> EventStream:
    """Load an interaction CSV: ``user_id,item_id,timestamp,state_label,f1,...``.

    The first line is a header. User and item ids live in two separate
    0-based spaces and are remapped to one contiguous space: users first (in
    order of first appearance), then items offset after all users. The edge
    feature dimension is inferred from the first data row and enforced on
    the rest. Rows are kept in file order, then stably sorted by timestamp,
    so equal timestamps keep file order.
    """
    if not os.path.exists(path):
        raise ParseError(f"no such file: {path}")
    srcs, dsts, ts, labels, feats = [], [], [], [], []
    d_e = None
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise ParseError("empty file", line=1)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cols = line.split(",")
            if len(cols) < 4:
                raise ParseError(
                    f"expected at least 4 columns, got {len(cols)}", line=lineno
                )
            if d_e is None:
                d_e = len(cols) - 4
            elif len(cols) - 4 != d_e:
                raise SchemaError(
                    f"expected {d_e} feature values, got {len(cols) - 4}", line=lineno
                )
            try:
                u = int(float(cols[0]))
                i = int(float(cols[1]))
                t = float(cols[2])
                lab = float(cols[3])
                fv = [float(c) for c in cols[4:]]
            except ValueError as exc:
                raise ParseError(f"non-numeric field ({exc})", line=lineno) from None
            srcs.append(u)
            dsts.append(i)
            ts.append(t)
            labels.append(lab)
            feats.append(fv)
    if d_e is None:
        raise ParseError("no data rows", line=2)

    # Users then items, contiguous, in order of first appearance.
    user_map, item_map = {}, {}
    for u in srcs:
        if u not in user_map:
            user_map[u] = len(user_map)
    for i in dsts:
        if i not in item_map:
            item_map[i] = len(item_map)
    n_users = len(user_map)
    src_arr = np.array([user_map[u] for u in srcs], dtype=np.int64)
    dst_arr = np.array([n_users + item_map[i] for i in dsts], dtype=np.int64)
    t_arr = np.asarray(ts, dtype=np.float64)
    seq_arr = np.arange(len(srcs), dtype=np.int64)
    order = np.argsort(t_arr, kind="stable")
    return EventStream(
        src_arr[order],
        dst_arr[order],
        t_arr[order],
        np.asarray(labels, dtype=np.float64)[order],
        np.asarray(feats, dtype=np.float64)[order],
        seq_arr[order],
        n_nodes=n_users + len(item_map),
        d_e=d_e,
    )


def chronological_split(stream: EventStream, train_frac: float, val_frac: float):
    """Split into (train, val, test) by position: ⌊train·m⌋ / ⌊val·m⌋ / rest."""
    check_fraction(train_frac, "train_frac")
    check_fraction(val_frac, "val_frac")
    if train_frac + val_frac >= 1.0:
        raise ConfigError(
            f"train_frac + val_frac must be < 1, got {train_frac + val_frac}"
        )
    m = len(stream)
    n_train = int(np.floor(train_frac * m))
    n_val = int(np.floor(val_frac * m))
    return (
        stream.slice(0, n_train),
        stream.slice(n_train, n_train + n_val),
        stream.slice(n_train + n_val, m),
    )


def make_batches(stream: EventStream, batch_size: int):
    """Contiguous order-preserving batches; all full except possibly the last."""
    check_positive_int(batch_size, "batch_size")
    m = len(stream)
    return [
        Batch(events=stream.slice(start, min(start + batch_size, m)), index=k)
        for k, start in enumerate(range(0, m, batch_size))
    ]


def sample_negatives(batch: Batch, dst_universe, seed) -> np.ndarray:
    """One uniform destination per batch event, from a seeded generator.

    ``dst_universe`` is canonicalized to sorted unique ids so the draw is
    independent of the caller's container ordering. Same seed, same output.
    """
    universe = np.unique(np.asarray(list(dst_universe), dtype=np.int64))
    if universe.size == 0:
        raise ConfigError("destination universe is empty")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, universe.size, size=len(batch))
    return universe[idx]


def synthetic_stream(
    n_events: int,
    n_users: int = 20,
    n_items: int = 10,
    d_e: int = 4,
    seed: int = 0,
    repeat_prob: float = 0.8,
) -> EventStream:
    """Generate a bipartite interaction stream with strong recency structure.

    Each user mostly re-interacts with its most recent item and otherwise
    jumps to a random one, so a model with per-node memory of recent activity
    can beat uniform negatives, and stale memory (large temporal batches)
    hurts. Timestamps accumulate exponential gaps. Edge features carry a
    noisy item signature.
    """
    check_positive_int(n_events, "n_events")
    rng = np.random.default_rng(seed)
    item_sig = rng.standard_normal((n_items, d_e))
    last_item = np.full(n_users, -1, dtype=np.int64)
    src = np.empty(n_events, dtype=np.int64)
    dst = np.empty(n_events, dtype=np.int64)
    t = np.cumsum(rng.exponential(1.0, size=n_events))
    feat = np.empty((n_events, d_e))
    for k in range(n_events):
        u = int(rng.integers(0, n_users))
        if last_item[u] >= 0 and rng.random() < repeat_prob:
            i = int(last_item[u])
        else:
            i = int(rng.integers(0, n_items))
        last_item[u] = i
        src[k] = u
        dst[k] = n_users + i
        feat[k] = item_sig[i] + 0.1 * rng.standard_normal(d_e)
    return EventStream(
        src,
        dst,
        t,
        np.zeros(n_events),
        feat,
        np.arange(n_events, dtype=np.int64),
        n_nodes=n_users + n_items,
        d_e=d_e,
    )
