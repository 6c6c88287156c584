"""Dense matrix utilities: norms, stable softmax, and a gradient checker.

All routines operate on float64 numpy arrays and are pure functions of their
inputs, so they are safe to call concurrently. Matrices are row-major 2-D
arrays; vectors are accepted where a single row is meant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, ProbeError
from .validation import as_matrix

POWER_ITERATION_TOL = 1e-9
POWER_ITERATION_CAP = 1000

GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_TOL = 1e-4


def frobenius_norm(m) -> float:
    """Square root of the sum of squared entries."""
    m = as_matrix(m, "matrix")
    return float(np.sqrt(np.sum(m * m)))


def max_abs(m) -> float:
    """Largest absolute entry."""
    m = as_matrix(m, "matrix")
    return float(np.max(np.abs(m)))


@dataclass
class PowerIterationResult:
    value: float
    converged: bool
    iterations: int


def power_iteration(
    m,
    tol: float = POWER_ITERATION_TOL,
    max_iter: int = POWER_ITERATION_CAP,
) -> PowerIterationResult:
    """Largest singular value of ``m`` by power iteration on MᵀM.

    Starts from the deterministic normalized all-ones vector; if the Rayleigh
    quotient stalls at zero on a nonzero matrix (start vector in the null
    space), restarts once from a fixed-seed random vector. Convergence is a
    relative change of the singular-value estimate below ``tol``.
    """
    m = as_matrix(m, "matrix")
    if np.isneginf(m).any():
        raise DimensionError("matrix contains -inf")
    n_cols = m.shape[1]
    v = np.ones(n_cols) / np.sqrt(n_cols)
    restarted = False
    sigma = 0.0
    it = 0
    while it < max_iter:
        it += 1
        w = m @ v
        sigma_new = float(np.sqrt(w @ w))  # ‖Mv‖ with ‖v‖=1
        if sigma_new == 0.0:
            if not restarted and np.any(m != 0.0):
                rng = np.random.default_rng(0x5EED)
                v = rng.standard_normal(n_cols)
                v /= np.linalg.norm(v)
                restarted = True
                continue
            return PowerIterationResult(0.0, True, it)
        if abs(sigma_new - sigma) <= tol * sigma_new:
            return PowerIterationResult(sigma_new, True, it)
        sigma = sigma_new
        v_next = m.T @ w
        norm = np.linalg.norm(v_next)
        if norm == 0.0:
            return PowerIterationResult(sigma_new, True, it)
        v = v_next / norm
    return PowerIterationResult(sigma, False, it)


def spectral_norm(m) -> float:
    """Largest singular value (see :func:`power_iteration` for the method)."""
    return power_iteration(m).value


def row_softmax(m) -> np.ndarray:
    """Row-wise softmax with unconditional per-row max subtraction.

    ``-inf`` logits are allowed and produce exactly-zero weights, which is how
    padded attention slots are masked out. A fully ``-inf`` row is rejected.
    """
    m = as_matrix(m, "logits")
    row_max = np.max(m, axis=1, keepdims=True)
    if np.isneginf(row_max).any():
        raise DimensionError("row_softmax: a row is entirely -inf")
    shifted = m - row_max
    # exp(-inf - finite) underflows to exactly 0, keeping masked slots at 0.
    with np.errstate(invalid="ignore"):
        e = np.exp(shifted)
    e[np.isneginf(shifted)] = 0.0
    return e / np.sum(e, axis=1, keepdims=True)


@dataclass
class GradCheckReport:
    """Outcome of comparing an analytic gradient with central differences."""

    param_name: str
    max_relative_error: float
    passed: bool
    worst_entry: tuple = (0, 0)
    suspect_nondifferentiable: bool = False
    suspect_entries: list = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = " (nondifferentiable point suspected)" if self.suspect_nondifferentiable else ""
        return f"[{status}] {self.param_name}: max rel err {self.max_relative_error:.3e}{extra}"


def grad_check(
    f,
    analytic_grad,
    point,
    param_name: str = "param",
    step: float = GRAD_CHECK_STEP,
    tol: float = GRAD_CHECK_TOL,
) -> GradCheckReport:
    """Check ``analytic_grad`` of scalar ``f`` at ``point`` by central differences.

    Perturbs each entry by ``±step``. The relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-3)``. A large second difference
    ``|f(x+h) + f(x-h) - 2 f(x)|`` marks the entry as a suspected
    nondifferentiable point; suspects fail the check rather than passing
    silently.
    """
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != point.shape:
        raise DimensionError(
            f"analytic grad shape {analytic.shape} != point shape {point.shape}"
        )
    f0 = float(f(point))
    if not np.isfinite(f0):
        raise ProbeError(f"f({param_name}) is non-finite at the base point")

    max_err = 0.0
    worst = (0, 0)
    suspects = []
    kink_threshold = 50.0 * step**1.5 * max(1.0, abs(f0))
    it = np.nditer(point, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        x = point.copy()
        x[idx] += step
        f_plus = float(f(x))
        x[idx] -= 2 * step
        f_minus = float(f(x))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ProbeError(f"f({param_name}) non-finite when probing entry {idx}")
        numeric = (f_plus - f_minus) / (2 * step)
        a = float(analytic[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
        if err > max_err:
            max_err = err
            worst = idx
        if abs(f_plus + f_minus - 2 * f0) > kink_threshold:
            suspects.append(idx)
        it.iternext()

    suspect = len(suspects) > 0
    return GradCheckReport(
        param_name=param_name,
        max_relative_error=max_err,
        passed=(max_err <= tol) and not suspect,
        worst_entry=worst,
        suspect_nondifferentiable=suspect,
        suspect_entries=suspects,
    )
