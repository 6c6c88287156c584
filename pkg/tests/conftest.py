"""Shared fixtures: micro training states small enough for finite differences."""

import numpy as np
import pytest

from badgnn.attention import NeighborIndex
from badgnn.events import make_batches, sample_negatives, synthetic_stream
from badgnn.memory import NodeMemory, flush_and_apply
from badgnn.training import TrainConfig, init_model_params


def make_micro_state(
    seed=0,
    n_events=6,
    batch_size=2,
    d_mem=3,
    d_time=2,
    d_e=2,
    d_k=3,
    h=2,
    m=2,
    lambda_tlr=0.0,
    lambda_a3=0.0,
):
    """A tiny warmed-up model state positioned right before one step.

    Two users and two items (4 nodes), a handful of events; all but the last
    batch already staged/applied so the step under test exercises a real
    flush, real neighbors, and non-trivial memory.
    """
    stream = synthetic_stream(n_events, n_users=2, n_items=2, d_e=d_e, seed=seed)
    cfg = TrainConfig(
        batch_size=batch_size,
        lambda_tlr=lambda_tlr,
        lambda_a3=lambda_a3,
        d_mem=d_mem,
        d_time=d_time,
        h=h,
        d_k=d_k,
        m=m,
        dropout_rate=0.0,
        epochs=1,
        seed=seed,
    )
    params = init_model_params(cfg, d_e=d_e, rng=np.random.default_rng(seed + 1))
    mem = NodeMemory(stream.n_nodes, d_mem)
    index = NeighborIndex(stream.n_nodes)
    batches = make_batches(stream, batch_size)
    att = params.attention
    for batch in batches[:-1]:
        flush_and_apply(mem, params.gru, att.time_omega, att.time_bias)
        mem.stage_events(batch.events)
        index.insert_events(batch.events)
    last = batches[-1]
    negs = sample_negatives(last, stream.destinations(), seed=seed + 2)
    return stream, mem, index, params, cfg, last, negs


@pytest.fixture
def micro_state():
    return make_micro_state()
