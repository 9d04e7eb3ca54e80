"""Hawkes process core: sequences, intensities, likelihood, Ogata thinning.

A process on the window [0, T] has conditional intensity

    lambda(t) = mu(t) + sum_{t_i < t, t - t_i <= T_phi} phi(t - t_i)

with a nonnegative background mu on [0, T] and a trigger kernel phi supported
on (0, T_phi]. Two compensator conventions coexist deliberately:

* ``log_likelihood(..., truncate_trigger=True)`` (default) charges each event
  the exact integral of phi up to min(T_phi, T - t_i) — the proper likelihood
  of the window, used for held-out scoring and time rescaling;
* ``truncate_trigger=False`` charges every event the full integral of phi over
  [0, T_phi] — the convention the augmented-likelihood engines optimize, which
  treats each event's offspring window as fully observed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .quadrature import QuadratureGrid, gauss_legendre

_TRIGGER_QUAD_ORDER = 48


class NonFiniteLikelihoodError(ValueError):
    """Likelihood is undefined: non-positive or non-finite intensity at an event."""


@dataclass(frozen=True)
class EventSequence:
    """Strictly increasing event times inside an observation window [0, T]."""

    times: np.ndarray
    T: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        object.__setattr__(self, "times", t)
        if not np.isfinite(self.T) or self.T <= 0.0:
            raise ValueError(f"window length must be positive, got {self.T}")
        if t.size:
            if not np.all(np.isfinite(t)):
                raise ValueError("event times must be finite")
            if np.any(np.diff(t) <= 0.0):
                raise ValueError("event times must be strictly increasing")
            if t[0] < 0.0 or t[-1] > self.T:
                raise ValueError("event times must lie within [0, T]")

    def __len__(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class RateFunctions:
    """Background and trigger rate of a Hawkes model.

    ``mu`` and ``phi`` must accept numpy arrays. ``phi`` is treated as zero
    outside (0, T_phi]; callers never evaluate it there. The optional exact
    antiderivatives (``mu_integral(t) = int_0^t mu``, ``phi_integral(x) =
    int_0^x phi`` for x in [0, T_phi]) let compensators skip quadrature.
    """

    mu: Callable
    phi: Callable
    T_phi: float
    mu_integral: Callable | None = None
    phi_integral: Callable | None = None

    def __post_init__(self):
        if not np.isfinite(self.T_phi) or self.T_phi <= 0.0:
            raise ValueError(f"trigger support length must be positive, got {self.T_phi}")


def admissible_pairs(times: np.ndarray, t_phi: float) -> tuple[np.ndarray, np.ndarray]:
    """Index/lag arrays of all (child i, parent j) pairs with 0 < t_i - t_j <= T_phi.

    Returns (child, lag) where child[k] is the index of the later event and
    lag[k] = t_child - t_parent, grouped by child in time order.
    """
    times = np.asarray(times, dtype=float)
    n = times.size
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=float)
    starts = np.searchsorted(times, times - t_phi, side="left")
    counts = np.arange(n) - starts
    child = np.repeat(np.arange(n), counts)
    # parent index sequence: starts[i], ..., i-1 for each child i
    offsets = np.concatenate(([0], np.cumsum(counts)))
    parent = np.arange(offsets[-1]) - np.repeat(offsets[:-1], counts) + np.repeat(starts, counts)
    lag = times[child] - times[parent]
    return child, lag


def intensities_at_events(seq: EventSequence, rates: RateFunctions) -> np.ndarray:
    """Conditional intensity evaluated at each event of the sequence."""
    lam = np.asarray(rates.mu(seq.times), dtype=float).copy()
    child, lag = admissible_pairs(seq.times, rates.T_phi)
    if child.size:
        lam += np.bincount(child, weights=np.asarray(rates.phi(lag), dtype=float), minlength=len(seq))
    return lam


def intensity(t: float, history: EventSequence, rates: RateFunctions) -> float:
    """lambda(t) given the events of ``history`` strictly before t."""
    t = float(t)
    times = history.times
    lo = np.searchsorted(times, t - rates.T_phi, side="left")
    hi = np.searchsorted(times, t, side="left")
    total = float(np.asarray(rates.mu(np.array([t])), dtype=float)[0])
    if hi > lo:
        total += float(np.sum(np.asarray(rates.phi(t - times[lo:hi]), dtype=float)))
    return total


def trigger_integral(rates: RateFunctions, upper) -> np.ndarray:
    """int_0^x phi for x clipped to [0, T_phi], exact when available."""
    x = np.clip(np.atleast_1d(np.asarray(upper, dtype=float)), 0.0, rates.T_phi)
    if rates.phi_integral is not None:
        return np.asarray(rates.phi_integral(x), dtype=float)
    base = gauss_legendre(_TRIGGER_QUAD_ORDER, 0.0, 1.0)
    # Affine-rescale one reference rule onto [0, x_i] for every upper limit.
    nodes = x[:, None] * base.nodes[None, :]
    vals = np.asarray(rates.phi(nodes), dtype=float)
    return (vals @ base.weights) * x


def log_likelihood(
    seq: EventSequence,
    rates: RateFunctions,
    quad: QuadratureGrid,
    truncate_trigger: bool = True,
) -> float:
    """Log likelihood of the sequence under the given rates.

    ``quad`` must cover [0, T] and is used for the background compensator.
    See the module docstring for the two trigger-compensator conventions.
    """
    if abs(quad.lower) > 1e-12 or abs(quad.upper - seq.T) > 1e-9 * max(1.0, seq.T):
        raise ValueError(f"quadrature grid [{quad.lower}, {quad.upper}] does not cover [0, {seq.T}]")
    mu_comp = float(quad.weights @ np.asarray(rates.mu(quad.nodes), dtype=float))
    if len(seq) == 0:
        return -mu_comp
    lam = intensities_at_events(seq, rates)
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0.0):
        idx = int(np.argmax(~np.isfinite(lam) | (lam <= 0.0)))
        raise NonFiniteLikelihoodError(
            f"intensity {lam[idx]} at event {idx} (t={seq.times[idx]}) is not a positive finite value"
        )
    if truncate_trigger:
        trig_comp = float(np.sum(trigger_integral(rates, seq.T - seq.times)))
    else:
        trig_comp = len(seq) * float(trigger_integral(rates, rates.T_phi)[0])
    return float(np.sum(np.log(lam))) - mu_comp - trig_comp


# ---------------------------------------------------------------------------
# Ogata thinning


def _tail_max_table(f, upper: float, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Grid x_k and M_k >= sup_{tau >= x_k} f(tau) over [0, upper]."""
    x = np.linspace(0.0, upper, size)
    vals = np.asarray(f(x), dtype=float)
    if np.any(~np.isfinite(vals)) or np.any(vals < 0.0):
        raise ValueError("trigger rate must be finite and non-negative on [0, T_phi]")
    tail = np.maximum.accumulate(vals[::-1])[::-1]
    # headroom for the sup-on-a-grid underestimate of smooth rates
    return x, tail * (1.0 + 1e-3) + 1e-12


def simulate_thinning(
    rates: RateFunctions,
    T: float,
    seed: int,
    max_events: int = 1_000_000,
    bound_grid: int = 4096,
) -> EventSequence:
    """Sample one sequence on [0, T] by Ogata thinning.

    The dominating rate is sup mu plus the sum over active events of the
    running maximum of phi over each event's remaining support; it is
    refreshed after every accepted event and every rejected candidate.
    Rates must be bounded; their suprema are taken on a dense grid with a
    0.1% safety margin, so pathologically spiky rates are out of scope.
    """
    if not np.isfinite(T) or T <= 0.0:
        raise ValueError(f"window length must be positive, got {T}")
    rng = np.random.default_rng(seed)
    mu_grid = np.asarray(rates.mu(np.linspace(0.0, T, 2 * bound_grid + 1)), dtype=float)
    if np.any(~np.isfinite(mu_grid)) or np.any(mu_grid < 0.0):
        raise ValueError("background rate must be finite and non-negative on [0, T]")
    mu_sup = float(np.max(mu_grid)) * (1.0 + 1e-3) + 1e-12
    tail_x, tail_m = _tail_max_table(rates.phi, rates.T_phi, bound_grid + 1)

    events: list[float] = []
    t = 0.0
    start = 0  # index of the oldest event still within T_phi of t
    while True:
        while start < len(events) and t - events[start] > rates.T_phi:
            start += 1
        active = np.asarray(events[start:], dtype=float)
        bound = mu_sup
        if active.size:
            idx = np.searchsorted(tail_x, t - active, side="right") - 1
            bound += float(np.sum(tail_m[np.maximum(idx, 0)]))
        if bound <= 1e-12:
            break
        t = t + rng.exponential(1.0 / bound)
        if t > T:
            break
        while start < len(events) and t - events[start] > rates.T_phi:
            start += 1
        active = np.asarray(events[start:], dtype=float)
        lam = float(np.asarray(rates.mu(np.array([t])), dtype=float)[0])
        if active.size:
            lam += float(np.sum(np.asarray(rates.phi(t - active), dtype=float)))
        if rng.uniform() * bound <= lam:
            events.append(t)
            if len(events) >= max_events:
                raise RuntimeError(f"simulation exceeded {max_events} events; rates look non-stationary")
    return EventSequence(np.asarray(events, dtype=float), float(T))


# ---------------------------------------------------------------------------
# Named generator presets

CASE_T = 100.0
CASE_T_PHI = 6.0


def case1_rates() -> RateFunctions:
    """Constant background mu = 1 with a half-sine trigger 0.33 sin(tau) on (0, pi]."""

    def mu(t):
        return np.ones_like(np.asarray(t, dtype=float))

    def phi(tau):
        tau = np.asarray(tau, dtype=float)
        return np.where((tau > 0.0) & (tau <= np.pi), 0.33 * np.sin(tau), 0.0)

    def mu_integral(t):
        return np.asarray(t, dtype=float).copy()

    def phi_integral(x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, None)
        return 0.33 * (1.0 - np.cos(np.minimum(x, np.pi)))

    return RateFunctions(mu, phi, T_phi=CASE_T_PHI, mu_integral=mu_integral, phi_integral=phi_integral)


def case2_rates(T: float = CASE_T) -> RateFunctions:
    """Sinusoidal background sin(2 pi t / T) + 1 with a damped oscillating trigger."""
    freq = 2.0 * np.pi / T
    a, b = 0.7, 2.0 * np.pi / 3.0

    def mu(t):
        t = np.asarray(t, dtype=float)
        return np.sin(freq * t) + 1.0

    def phi(tau):
        tau = np.asarray(tau, dtype=float)
        val = 0.3 * (np.sin(b * tau) + 1.0) * np.exp(-a * tau)
        return np.where((tau > 0.0) & (tau <= CASE_T_PHI), val, 0.0)

    def mu_integral(t):
        t = np.asarray(t, dtype=float)
        return t + (1.0 - np.cos(freq * t)) / freq

    def phi_integral(x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, CASE_T_PHI)
        decay = np.exp(-a * x)
        i_sin = (b - decay * (a * np.sin(b * x) + b * np.cos(b * x))) / (a * a + b * b)
        i_exp = (1.0 - decay) / a
        return 0.3 * (i_sin + i_exp)

    return RateFunctions(mu, phi, T_phi=CASE_T_PHI, mu_integral=mu_integral, phi_integral=phi_integral)


PRESETS: dict[str, Callable[[], RateFunctions]] = {"case1": case1_rates, "case2": case2_rates}


def table_rates(mu_t, mu_value, phi_tau, phi_value, t_phi: float) -> RateFunctions:
    """Rates given as linear-interpolation tables (used by the CLI)."""
    mu_t = np.asarray(mu_t, dtype=float)
    mu_value = np.asarray(mu_value, dtype=float)
    phi_tau = np.asarray(phi_tau, dtype=float)
    phi_value = np.asarray(phi_value, dtype=float)
    if mu_t.size != mu_value.size or mu_t.size < 2 or np.any(np.diff(mu_t) <= 0):
        raise ValueError("mu table needs >= 2 strictly increasing abscissae matching values")
    if phi_tau.size != phi_value.size or phi_tau.size < 2 or np.any(np.diff(phi_tau) <= 0):
        raise ValueError("phi table needs >= 2 strictly increasing abscissae matching values")
    if np.any(mu_value < 0) or np.any(phi_value < 0):
        raise ValueError("rate tables must be non-negative")

    def mu(t):
        return np.interp(np.asarray(t, dtype=float), mu_t, mu_value)

    def phi(tau):
        tau = np.asarray(tau, dtype=float)
        return np.where((tau > 0.0) & (tau <= t_phi), np.interp(tau, phi_tau, phi_value), 0.0)

    return RateFunctions(mu, phi, T_phi=float(t_phi))


# ---------------------------------------------------------------------------
# On-disk format: one timestamp per line under a 't' header, window metadata
# in a sidecar JSON manifest.


def write_events_csv(path, seq: EventSequence) -> None:
    lines = ["t"] + [format(t, ".17g") for t in seq.times]
    Path(path).write_text("\n".join(lines) + "\n")


def read_events_csv(path, T: float) -> EventSequence:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].strip() != "t":
        raise ValueError(f"{path}: expected a CSV with a single 't' header line")
    times = np.asarray([float(line) for line in text[1:]], dtype=float)
    return EventSequence(times, float(T))


def write_manifest(path, T: float, T_phi: float, **extra) -> None:
    from .serialize import save_json

    payload = {"T": float(T), "T_phi": float(T_phi)}
    payload.update(extra)
    save_json(path, payload)


def read_manifest(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset manifest not found: {p}")
    data = json.loads(p.read_text())
    for key in ("T", "T_phi"):
        if key not in data:
            raise ValueError(f"{p}: manifest is missing required key '{key}'")
    return data
