"""Sensitivity diagnostics: bound terms for the attention layer and loss,
their batch-sensitivity combination, and empirical perturbation probes.

These quantities are computed on demand from parameter/activation snapshots
and never participate in the gradient path. All probes draw from their own
seeded generators, so repeated reports are identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attention import attention_forward_batch
from .exceptions import DimensionError, ProbeError
from .linalg import frobenius_norm, max_abs, spectral_norm
from .validation import as_matrix, check_non_negative, check_positive_int, check_same_length


def loss_lipschitz(p, y) -> float:
    """Sensitivity constant of summed binary cross-entropy: ``|Σ (p_i - y_i)|``.

    Grows with the number of summed terms and is capped by it, since each
    residual lies in (-1, 1).
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    check_same_length(p, y, "p", "y")
    return float(abs(np.sum(p - y)))


def lambda_term(q_mat, v_mat) -> float:
    """Query-value interaction strength: ``‖QVᵀ‖_F ‖QVᵀ‖_max ‖V‖_F ‖V‖_max``."""
    q = as_matrix(q_mat, "q_mat")
    v = as_matrix(v_mat, "v_mat")
    if q.shape[1] != v.shape[1]:
        raise DimensionError(
            f"inner dimensions differ: Q is {q.shape}, V is {v.shape}"
        )
    if not v.any() or not q.any():
        return 0.0
    qv = q @ v.T
    return frobenius_norm(qv) * max_abs(qv) * frobenius_norm(v) * max_abs(v)


def delta_term(s_mat, v_mat, q_mat) -> float:
    """Spectral activity of the weighted value/query composite.

    ``‖(sqrt(S V Vᵀ))ᵀ Q Vᵀ‖_*²`` with the square root taken elementwise and
    negative entries clamped to zero first (S V Vᵀ need not be entrywise
    non-negative). Shapes: S (a, m) row-stochastic, V (m, n), Q (a, n).
    """
    s = as_matrix(s_mat, "s_mat")
    v = as_matrix(v_mat, "v_mat")
    q = as_matrix(q_mat, "q_mat")
    if s.shape[1] != v.shape[0]:
        raise DimensionError(f"S cols {s.shape[1]} != V rows {v.shape[0]}")
    if q.shape != (s.shape[0], v.shape[1]):
        raise DimensionError(
            f"Q must be ({s.shape[0]}, {v.shape[1]}), got {q.shape}"
        )
    if not np.allclose(s.sum(axis=1), 1.0, atol=1e-6):
        raise DimensionError("S rows must sum to 1")
    core = np.sqrt(np.clip(s @ v @ v.T, 0.0, None))
    return spectral_norm(core.T @ q @ v.T) ** 2


def _bracket(lam: float, delta: float, m: int, n: int, sigma: float) -> float:
    mn = float(m * n)
    return (mn**2) * lam + (m**2) * (n**1.5) * lam - (2.0 * n * sigma**2 / mn**2) * delta


@dataclass
class AttBoundDetail:
    value: float
    bracket: float
    clamped: bool


def att_bound_detail(lam, delta, m, n, d_k, sigma) -> AttBoundDetail:
    """Per-head sensitivity bound; a negative bracket clamps to zero."""
    check_positive_int(m, "m")
    check_positive_int(n, "n")
    check_positive_int(d_k, "d_k")
    check_non_negative(sigma, "sigma")
    check_non_negative(lam, "lambda term")
    check_non_negative(delta, "delta term")
    bracket = _bracket(lam, delta, m, n, sigma)
    clamped = bracket < 0.0
    value = float(np.sqrt(max(bracket, 0.0) / d_k))
    return AttBoundDetail(value=value, bracket=bracket, clamped=clamped)


def att_bound(lam, delta, m, n, d_k, sigma) -> float:
    return att_bound_detail(lam, delta, m, n, d_k, sigma).value


def model_bound(w0, head_bounds) -> float:
    """Whole-layer bound: ``‖W₀‖_* · sqrt(Σ per-head bounds²)``."""
    head_bounds = np.asarray(head_bounds, dtype=np.float64).ravel()
    if head_bounds.size == 0:
        raise DimensionError("need at least one head bound")
    return spectral_norm(w0) * float(np.sqrt(np.sum(head_bounds**2)))


def bsr(lam, delta, m, n, d_k, sigma) -> float:
    """Batch sensitivity range ``μ₁Λ - μ₂Δ`` with the bound's own coefficients.

    ``μ₁ = (mn)² + m²n^{3/2}`` and ``μ₂ = 2nσ²/(mn)²``, so this equals the
    per-head bound's bracket: ``d_k · att_bound²`` before clamping. ``d_k``
    is accepted for signature symmetry; it cancels out of the range itself.
    """
    check_positive_int(m, "m")
    check_positive_int(n, "n")
    check_positive_int(d_k, "d_k")
    check_non_negative(sigma, "sigma")
    return _bracket(lam, delta, m, n, sigma)


def bsr_coefficients(m: int, n: int, sigma: float):
    """(μ₁, μ₂) as used by :func:`bsr`; μ₂ ≪ μ₁ for any realistic sizes."""
    mn = float(m * n)
    return mn**2 + (m**2) * (n**1.5), 2.0 * n * sigma**2 / mn**2


def empirical_probe(f, base, trials: int, step: float, seed=0) -> float:
    """Largest observed ``‖f(x+δ) - f(x)‖_F / ‖δ‖_F`` over seeded directions.

    Each perturbation is Gaussian, rescaled to Frobenius norm ``step``.
    Deterministic given the seed. Raises on non-finite outputs.
    """
    check_positive_int(trials, "trials")
    if step <= 0:
        raise ProbeError(f"step must be > 0, got {step}")
    base = np.asarray(base, dtype=np.float64)
    rng = np.random.default_rng(seed)
    f0 = np.asarray(f(base), dtype=np.float64)
    if not np.isfinite(f0).all():
        raise ProbeError("model output non-finite at the base point")
    best = 0.0
    for _ in range(trials):
        delta = rng.standard_normal(base.shape)
        norm = np.sqrt(np.sum(delta * delta))
        if norm == 0.0:
            continue
        delta *= step / norm
        out = np.asarray(f(base + delta), dtype=np.float64)
        if not np.isfinite(out).all():
            raise ProbeError("model output non-finite at a probe point")
        ratio = np.sqrt(np.sum((out - f0) ** 2)) / step
        best = max(best, float(ratio))
    return best


# ---------------------------------------------------------------------------
# whole-model report
# ---------------------------------------------------------------------------

@dataclass
class LipschitzReport:
    """Analytic bound terms plus the empirical probe estimate for one model."""

    l_loss: float
    lambda_term: float
    delta_term: float
    att_bound: list
    model_bound: float
    bsr: float
    sigma: float
    m: int
    n: int
    d_k: int
    batch_size: int
    empirical_ratio_max: float
    probe_within_bound: bool
    degenerate_bound: bool
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "l_loss": self.l_loss,
                "lambda_term": self.lambda_term,
                "delta_term": self.delta_term,
                "att_bound": self.att_bound,
                "model_bound": self.model_bound,
                "bsr": self.bsr,
                "sigma": self.sigma,
                "m": self.m,
                "n": self.n,
                "d_k": self.d_k,
                "batch_size": self.batch_size,
                "empirical_ratio_max": self.empirical_ratio_max,
                "probe_within_bound": self.probe_within_bound,
                "degenerate_bound": self.degenerate_bound,
                "config": self.config,
            },
            sort_keys=True,
            indent=2,
        )


def attention_head_terms(cache):
    """Per-head (max Λ, min Δ) over the targets of a cached forward pass.

    The maximum interaction term and minimum spectral-activity term are the
    conservative choices for the bound (Λ enters positively, Δ negatively).
    """
    h, b, _ = cache.q.shape
    lams = np.zeros((h, b))
    deltas = np.zeros((h, b))
    for i in range(h):
        for j in range(b):
            q_row = cache.q[i, j:j + 1]
            v_mat = cache.v[i, j]
            s_row = cache.weights[i, j:j + 1]
            if q_row.any() and v_mat.any():
                lams[i, j] = lambda_term(q_row, v_mat)
                deltas[i, j] = delta_term(s_row, v_mat, q_row)
    return lams.max(axis=1), deltas.min(axis=1)


def report_for_model(
    params,
    cfg,
    mem=None,
    n_targets: int = 16,
    trials: int = 200,
    step: float = 1e-3,
    seed: int = 0,
    sigma: float | None = None,
) -> LipschitzReport:
    """Compute every bound quantity on a seeded probe batch.

    Probe target states are sampled from the supplied memory table when
    given (so a trained checkpoint is probed at realistic operating points),
    otherwise drawn standard normal. The probe perturbs the neighbor inputs
    and measures the attention output, the same norm pairing (Frobenius in,
    Frobenius out) used by the analytic bound comparison.
    """
    from .training import ModelParams, _effective_c, _sigmoid

    assert isinstance(params, ModelParams)
    att = params.attention
    sigma = cfg.sigma if sigma is None else sigma
    m, d_k, heads = cfg.m, cfg.d_k, cfg.h
    d_mem = cfg.d_mem
    d_e = att.d_kv_in - d_mem - att.d_time
    n_input = att.d_kv_in
    rng = np.random.default_rng(seed)

    if mem is not None and np.asarray(mem.state).any():
        picks = rng.integers(0, mem.state.shape[0], size=n_targets)
        states_q = np.asarray(mem.state)[picks]
        nbr_picks = rng.integers(0, mem.state.shape[0], size=(n_targets, m))
        nbr_states = np.asarray(mem.state)[nbr_picks]
    else:
        states_q = rng.standard_normal((n_targets, d_mem))
        nbr_states = rng.standard_normal((n_targets, m, d_mem))
    nbr_feats = rng.standard_normal((n_targets, m, d_e))
    dt_k = rng.uniform(0.0, 10.0, size=(n_targets, m))
    mask = np.ones((n_targets, m), dtype=bool)
    c = _effective_c(cfg, att)

    def forward(nbr_states_probe):
        out, _ = attention_forward_batch(
            states_q, np.zeros(n_targets), nbr_states_probe, nbr_feats,
            dt_k, mask, att, c=c,
        )
        return out

    out, cache = attention_forward_batch(
        states_q, np.zeros(n_targets), nbr_states, nbr_feats, dt_k, mask,
        att, c=c,
    )
    lams, deltas = attention_head_terms(cache)
    details = [
        att_bound_detail(lams[i], deltas[i], m, n_input, d_k, sigma)
        for i in range(heads)
    ]
    head_bounds = [d.value for d in details]
    mb = model_bound(att.w0, head_bounds)
    bsr_value = bsr(float(lams.max()), float(deltas.min()), m, n_input, d_k, sigma)

    ratio = empirical_probe(forward, nbr_states, trials=trials, step=step, seed=seed + 1)

    # Loss-side constant on the probe's own predictions.
    probs = _sigmoid(out @ rng.standard_normal(att.d_emb) * 0.1)
    labels = (np.arange(n_targets) % 2).astype(np.float64)
    l_loss = loss_lipschitz(probs, labels)

    return LipschitzReport(
        l_loss=l_loss,
        lambda_term=float(lams.max()),
        delta_term=float(deltas.min()),
        att_bound=head_bounds,
        model_bound=float(mb),
        bsr=float(bsr_value),
        sigma=float(sigma),
        m=int(m),
        n=int(n_input),
        d_k=int(d_k),
        batch_size=int(cfg.batch_size),
        empirical_ratio_max=float(ratio),
        probe_within_bound=bool(ratio <= mb) if mb > 0 else bool(ratio == 0.0),
        degenerate_bound=any(d.clamped for d in details),
        config=cfg.to_dict(),
    )
