"""Scikit-learn style front end for the stream learner.

``TemporalLinkPredictor`` wraps the training loop behind ``fit`` /
``predict_proba`` / ``score`` with standard ``get_params`` semantics, so the
model drops into pipelines, grid search, and cloning like any estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .attention import NeighborIndex
from .events import EventStream, load_jodie_csv
from .exceptions import StateError
from .memory import NodeMemory
from .training import (
    Metrics,
    TrainConfig,
    evaluate,
    run_training,
)


class TemporalLinkPredictor(BaseEstimator):
    """Memory-based temporal attention model for streaming link prediction.

    ``fit`` consumes a chronologically sorted event stream and trains the
    model end to end; ``predict_proba``/``evaluate`` score a later stream
    continuing from the fitted memory state without touching parameters.
    ``lambda_tlr=0`` and ``lambda_a3=0`` give the plain baseline; positive
    values enable the query-value regularizer and score sharpening.
    """

    def __init__(
        self,
        batch_size: int = 200,
        lambda_tlr: float = 0.0,
        lambda_a3: float = 0.0,
        lr: float = 5e-4,
        epochs: int = 1,
        seed: int = 0,
        d_mem: int = 32,
        d_time: int = 16,
        h: int = 2,
        d_k: int = 8,
        m: int = 1,
        dropout_rate: float = 0.1,
        a3_form: str = "affine",
        aggregator: str = "last",
    ):
        self.batch_size = batch_size
        self.lambda_tlr = lambda_tlr
        self.lambda_a3 = lambda_a3
        self.lr = lr
        self.epochs = epochs
        self.seed = seed
        self.d_mem = d_mem
        self.d_time = d_time
        self.h = h
        self.d_k = d_k
        self.m = m
        self.dropout_rate = dropout_rate
        self.a3_form = a3_form
        self.aggregator = aggregator

    # -- helpers ----------------------------------------------------------

    def _config(self) -> TrainConfig:
        cfg = TrainConfig(
            batch_size=self.batch_size,
            lambda_tlr=self.lambda_tlr,
            lambda_a3=self.lambda_a3,
            lr=self.lr,
            epochs=self.epochs,
            seed=self.seed,
            d_mem=self.d_mem,
            d_time=self.d_time,
            h=self.h,
            d_k=self.d_k,
            m=self.m,
            dropout_rate=self.dropout_rate,
            a3_form=self.a3_form,
            aggregator=self.aggregator,
        )
        cfg.validate()
        return cfg

    @staticmethod
    def _as_stream(X) -> EventStream:
        if isinstance(X, EventStream):
            return X
        if isinstance(X, str):
            return load_jodie_csv(X)
        raise TypeError(f"expected an EventStream or CSV path, got {type(X)!r}")

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise StateError("estimator is not fitted; call fit first")

    # -- sklearn surface ---------------------------------------------------

    def fit(self, X, y=None):
        """Train on the given stream; ``y`` is ignored (labels are implicit)."""
        stream = self._as_stream(X)
        cfg = self._config()
        result = run_training(stream, None, None, cfg)
        self.params_ = result.params
        self.memory_ = result.memory
        self.config_ = cfg
        self.history_ = result.history
        self.n_nodes_ = stream.n_nodes
        self.d_e_ = stream.d_e
        self.dst_universe_ = stream.destinations()
        self.train_stream_ = stream
        index = NeighborIndex(stream.n_nodes)
        index.insert_events(stream)
        self.index_ = index
        return self

    def evaluate(self, X) -> Metrics:
        """Ranking metrics on a continuation stream (fitted state untouched)."""
        self._check_fitted()
        stream = self._as_stream(X)
        mem = self.memory_.copy()
        index = self.index_.copy()
        return evaluate(
            stream, mem, self.params_, self.config_, index,
            self.dst_universe_, split_tag=2,
        )

    def predict_proba(self, X) -> np.ndarray:
        """Per-event probabilities, sklearn-style columns [P(no-edge), P(edge)].

        Events are scored one step ahead in order, advancing a copy of the
        fitted memory, so repeated calls give identical results.
        """
        from .events import make_batches
        from .training import run_step

        self._check_fitted()
        stream = self._as_stream(X)
        mem = self.memory_.copy()
        index = self.index_.copy()
        scores = []
        for batch in make_batches(stream, self.config_.batch_size):
            # Negatives are irrelevant here; reuse the positive destinations.
            result = run_step(
                batch, batch.events.dst, mem, index, self.params_,
                self.config_, dropout_mask=None, with_grads=False,
            )
            scores.append(result.probs[:len(batch)])
            mem.stage_events(batch.events)
            index.insert_events(batch.events)
        pos = np.concatenate(scores)
        return np.column_stack([1.0 - pos, pos])

    def score(self, X, y=None) -> float:
        """Average precision against sampled negatives on ``X``."""
        return self.evaluate(X).ap
