"""Batch-robust temporal graph stream learning.

A memory-based temporal attention model for link prediction on interaction
streams, with two stability controls (a query-value regularizer and a score
sharpener), a sensitivity diagnostics suite, an sklearn-style estimator, and
a CLI for training, evaluation, and sweeps.
"""

from .estimator import TemporalLinkPredictor
from .events import (
    Batch,
    Event,
    EventStream,
    chronological_split,
    load_jodie_csv,
    make_batches,
    sample_negatives,
    synthetic_stream,
)
from .training import Metrics, TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "Event",
    "EventStream",
    "Metrics",
    "TemporalLinkPredictor",
    "TrainConfig",
    "chronological_split",
    "load_jodie_csv",
    "make_batches",
    "run_training",
    "sample_negatives",
    "synthetic_stream",
    "__version__",
]
