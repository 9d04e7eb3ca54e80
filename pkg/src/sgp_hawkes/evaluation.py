"""Held-out scoring, estimation error, and time-rescaling goodness of fit.

The time-rescaling transform maps event times through the fitted compensator
Lambda(t) = int_0^t lambda; if the fitted model is the true generator, the
increments tau_i = Lambda(t_i) - Lambda(t_{i-1}) are i.i.d. Exponential(1),
so z_i = 1 - exp(-tau_i) are i.i.d. Uniform(0,1) and can be checked with a
one-sample Kolmogorov-Smirnov test or a Q-Q plot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .process import EventSequence, RateFunctions, admissible_pairs, log_likelihood, trigger_integral
from .quadrature import QuadratureGrid, gauss_legendre

_RESCALE_QUAD_ORDER = 32  # per-gap background integration when no exact form exists


@dataclass(frozen=True)
class RescaledSample:
    """Time-rescaled test events: z values, their tau increments, Lambda at events.

    One entry per event after the first (the first event's increment depends on
    the unobserved pre-window history and is dropped). ``n_clamped`` counts
    numerically negative increments that were clamped to zero; such entries sit
    at exactly z = 0, healthy samples lie strictly inside (0, 1).
    """

    z: np.ndarray
    tau: np.ndarray
    lam: np.ndarray  # Lambda(t_i) for every event, including the first
    n_clamped: int

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        object.__setattr__(self, "z", z)
        if z.size and (np.any(z < 0.0) or np.any(z >= 1.0) or np.any(~np.isfinite(z))):
            raise ValueError("rescaled values must lie in [0, 1)")


def test_ll(fitted: RateFunctions, holdout: EventSequence, quad: QuadratureGrid) -> float:
    """Log likelihood of one held-out sequence, history empty at its origin."""
    return log_likelihood(holdout, fitted, quad, truncate_trigger=True)


def est_err(estimate, truth, grid: np.ndarray) -> float:
    """Mean squared difference between two rate functions on a grid.

    ``estimate`` and ``truth`` may be callables or precomputed value arrays.
    """
    grid = np.asarray(grid, dtype=float)
    est = np.asarray(estimate(grid) if callable(estimate) else estimate, dtype=float)
    tru = np.asarray(truth(grid) if callable(truth) else truth, dtype=float)
    if est.shape != grid.shape or tru.shape != grid.shape:
        raise ValueError("estimate/truth values must match the grid shape")
    return float(np.mean((est - tru) ** 2))


def _background_compensator(rates: RateFunctions, times: np.ndarray) -> np.ndarray:
    """int_0^{t_i} mu for every event, exact or per-gap Gauss-Legendre."""
    if rates.mu_integral is not None:
        return np.asarray(rates.mu_integral(times), dtype=float)
    base = gauss_legendre(_RESCALE_QUAD_ORDER, 0.0, 1.0)
    left = np.concatenate(([0.0], times[:-1]))
    gaps = times - left
    nodes = left[:, None] + gaps[:, None] * base.nodes[None, :]
    vals = np.asarray(rates.mu(nodes), dtype=float)
    return np.cumsum((vals @ base.weights) * gaps)


def rescale(fitted: RateFunctions, seq: EventSequence, quad: QuadratureGrid) -> RescaledSample:
    """Time-rescaling transform of a sequence under fitted rates.

    The trigger part of the compensator uses exact kernel integrals where the
    rates provide them; the background part uses the exact antiderivative when
    available and otherwise a fixed-order rule on each inter-event gap (the
    ``quad`` argument only documents the window and is not consulted here).
    """
    times = seq.times
    if times.size == 0:
        return RescaledSample(np.empty(0), np.empty(0), np.empty(0), 0)
    lam = _background_compensator(fitted, times)
    child, lag = admissible_pairs(times, fitted.T_phi)
    if child.size:
        lam = lam + np.bincount(child, weights=trigger_integral(fitted, lag), minlength=times.size)
    full = float(trigger_integral(fitted, fitted.T_phi)[0])
    expired = np.searchsorted(times, times - fitted.T_phi, side="left")
    lam = lam + expired * full
    tau = np.diff(lam)
    n_clamped = int(np.sum(tau < 0.0))
    tau = np.maximum(tau, 0.0)
    z = np.minimum(-np.expm1(-tau), np.nextafter(1.0, 0.0))
    return RescaledSample(z=z, tau=tau, lam=lam, n_clamped=n_clamped)


def ks_statistic(sample: RescaledSample) -> tuple[float, float]:
    """One-sample KS distance of the z values against Uniform(0,1)."""
    z = sample.z
    if z.size == 0:
        raise ValueError("cannot run a KS test on an empty rescaled sample")
    res = stats.kstest(z, "uniform", method="asymp")
    return float(res.statistic), float(res.pvalue)


def qq_pairs(sample: RescaledSample) -> tuple[np.ndarray, np.ndarray]:
    """(theoretical, empirical) uniform quantile pairs for Q-Q plotting."""
    z = np.sort(sample.z)
    n = z.size
    theoretical = (np.arange(1, n + 1) - 0.5) / n if n else np.empty(0)
    return theoretical, z
