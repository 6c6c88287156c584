"""Input validation helpers shared by the public API surface."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, DimensionError


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a non-empty 2-D float64 array.

    Rejects empty matrices and NaN entries. ``-inf`` is tolerated because
    masked attention logits use it as an exact-zero-weight sentinel; ``+inf``
    is not.
    """
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size == 0:
        raise DimensionError(f"{name} is empty (shape {m.shape})")
    if np.isnan(m).any():
        raise DimensionError(f"{name} contains NaN")
    if np.isposinf(m).any():
        raise DimensionError(f"{name} contains +inf")
    return m


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size == 0:
        raise DimensionError(f"{name} is empty")
    if not np.isfinite(v).all():
        raise DimensionError(f"{name} contains non-finite values")
    return v


def check_same_length(a, b, name_a: str, name_b: str) -> None:
    if len(a) != len(b):
        raise DimensionError(
            f"{name_a} and {name_b} must have equal length, got {len(a)} vs {len(b)}"
        )


def check_fraction(x: float, name: str, *, closed_left: bool = False) -> float:
    lo_ok = x >= 0.0 if closed_left else x > 0.0
    if not (lo_ok and x < 1.0):
        lo = "[0, 1)" if closed_left else "(0, 1)"
        raise ConfigError(f"{name} must be in {lo}, got {x}")
    return float(x)


def check_positive_int(x: int, name: str) -> int:
    if not (isinstance(x, (int, np.integer)) and x >= 1):
        raise ConfigError(f"{name} must be an integer >= 1, got {x!r}")
    return int(x)


def check_non_negative(x: float, name: str) -> float:
    if x < 0:
        raise ConfigError(f"{name} must be >= 0, got {x}")
    return float(x)
