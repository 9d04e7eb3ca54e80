"""Shared plumbing for the EM and variational engines.

Both engines consume the same sufficient-statistic shapes: Dirac weights at
event locations (baseline component) or pairwise lags (trigger component),
plus weighted rate densities on a fixed quadrature grid. The Gaussian-map
update, the posterior covariance, and the kernel-hyperparameter profile
search all run off one assembly routine, so the two engines cannot drift
apart numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from .kernels import (
    THETA_BOUNDS,
    GramMatrix,
    InducingGrid,
    KernelHyperparams,
    SingularMatrixError,
    gram,
    se_cross,
)
from .process import EventSequence, admissible_pairs
from .quadrature import DEFAULT_GH_ORDER, QuadratureGrid, gauss_legendre

_SEARCH_BINS = 2048


@dataclass
class FitConfig:
    """Knobs shared by the EM and variational fitters."""

    T: float
    T_phi: float
    S_mu: int = 10
    S_phi: int = 10
    quad_order_T: int = 50
    quad_order_Tphi: int = 50
    max_iter: int = 200
    tol: float = 1e-4
    hyper_refresh_every: int = 20
    theta0_init: float = 1.0
    theta1_init: float | None = None  # None -> per-component 1/spacing^2
    seed: int = 0
    gh_order: int = DEFAULT_GH_ORDER
    eval_grid: int = 200
    band_quantile: float | None = None  # reserved for future interval reporting
    fix_variance: bool = False  # debug: pin the GP factor covariance near zero

    def __post_init__(self):
        if self.T <= 0 or self.T_phi <= 0:
            raise ValueError("T and T_phi must be positive")
        if self.S_mu < 2 or self.S_phi < 2:
            raise ValueError("need at least two inducing points per component")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class FitReport:
    """Outcome of one fit: trace, estimates on an evaluation grid, timings."""

    method: str
    converged: bool
    n_iter: int
    runtime_seconds: float
    objective_trace: list[float]
    hyper_history: list[dict]
    warnings: list[str]
    grid_mu: np.ndarray
    mu_hat: np.ndarray
    grid_phi: np.ndarray
    phi_hat: np.ndarray
    mu_std: np.ndarray | None = None
    phi_std: np.ndarray | None = None


@dataclass(frozen=True)
class Dataset:
    """One or more same-window sequences with pooled admissible pairs."""

    sequences: tuple[EventSequence, ...]
    T: float
    T_phi: float
    events: np.ndarray  # all events, sequence by sequence
    child: np.ndarray  # pair -> index into ``events`` of the later event
    lag: np.ndarray  # pair -> t_child - t_parent, in (0, T_phi]

    @property
    def n_sequences(self) -> int:
        return len(self.sequences)

    @property
    def n_events(self) -> int:
        return self.events.size

    @property
    def n_pairs(self) -> int:
        return self.lag.size


def build_dataset(seqs: EventSequence | Sequence[EventSequence], t_phi: float) -> Dataset:
    if isinstance(seqs, EventSequence):
        seqs = [seqs]
    seqs = tuple(seqs)
    if not seqs:
        raise ValueError("need at least one sequence")
    T = seqs[0].T
    for s in seqs:
        if abs(s.T - T) > 1e-9 * max(1.0, T):
            raise ValueError("all training sequences must share the same window length")
    events, children, lags = [], [], []
    offset = 0
    for s in seqs:
        child, lag = admissible_pairs(s.times, t_phi)
        events.append(s.times)
        children.append(child + offset)
        lags.append(lag)
        offset += len(s)
    return Dataset(
        sequences=seqs,
        T=float(T),
        T_phi=float(t_phi),
        events=np.concatenate(events) if events else np.empty(0),
        child=np.concatenate(children) if children else np.empty(0, dtype=np.int64),
        lag=np.concatenate(lags) if lags else np.empty(0),
    )


@dataclass(frozen=True)
class BranchingPosterior:
    """Per-event cause distribution: background weight + flat parent weights.

    ``parent[k]`` is the responsibility of the pair with child ``child[k]``;
    entries exist only for admissible pairs (lag in (0, T_phi]), so storage
    is O(number of admissible pairs).
    """

    background: np.ndarray
    parent: np.ndarray
    child: np.ndarray
    n_events: int

    def row_sums(self) -> np.ndarray:
        return self.background + np.bincount(
            self.child, weights=self.parent, minlength=self.n_events
        )


def normalize_branching(bg_numer, pair_numer, child, n_events) -> BranchingPosterior:
    bg_numer = np.asarray(bg_numer, dtype=float)
    pair_numer = np.asarray(pair_numer, dtype=float)
    denom = bg_numer + np.bincount(child, weights=pair_numer, minlength=n_events)
    if np.any(denom <= 0.0) or np.any(~np.isfinite(denom)):
        raise ValueError("branching normalizer must be positive and finite")
    return BranchingPosterior(
        background=bg_numer / denom,
        parent=pair_numer / denom[child] if pair_numer.size else pair_numer,
        child=child,
        n_events=n_events,
    )


def uniform_branching(data: Dataset) -> BranchingPosterior:
    return normalize_branching(
        np.ones(data.n_events), np.ones(data.n_pairs), data.child, data.n_events
    )


@dataclass
class ComponentCache:
    """Kernel matrices from one component's data locations to its inducing grid."""

    grid: InducingGrid
    hp: KernelHyperparams
    gm: GramMatrix
    points: np.ndarray
    k_points: np.ndarray
    quad: QuadratureGrid
    k_quad: np.ndarray

    @classmethod
    def build(cls, points, grid: InducingGrid, hp: KernelHyperparams, quad: QuadratureGrid):
        points = np.asarray(points, dtype=float)
        return cls(
            grid=grid,
            hp=hp,
            gm=gram(grid, hp),
            points=points,
            k_points=se_cross(points, grid.points, hp),
            quad=quad,
            k_quad=se_cross(quad.nodes, grid.points, hp),
        )

    def with_hp(self, hp: KernelHyperparams) -> "ComponentCache":
        return ComponentCache.build(self.points, self.grid, hp, self.quad)

    def project_mean(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(projection at data points, projection at quadrature nodes)."""
        alpha = self.gm.solve(np.asarray(u, dtype=float))
        return self.k_points @ alpha, self.k_quad @ alpha

    def project_meanvar(self, mean_u: np.ndarray, cov_u: np.ndarray):
        """Projected marginal mean/variance at data points and quad nodes."""
        alpha = self.gm.solve(np.asarray(mean_u, dtype=float))
        w = self.gm.solve(self.gm.solve(np.asarray(cov_u, dtype=float)).T)
        m_pts = self.k_points @ alpha
        m_q = self.k_quad @ alpha
        v_pts = np.maximum(np.einsum("ns,ns->n", self.k_points @ w, self.k_points), 0.0)
        v_q = np.maximum(np.einsum("ns,ns->n", self.k_quad @ w, self.k_quad), 0.0)
        return m_pts, v_pts, m_q, v_q


@dataclass(frozen=True)
class ComponentStats:
    """A/B statistics of one GP component, in assembly-ready form.

    The Gaussian update solves
        cov = K (U + K)^{-1} K,   mean = K (U + K)^{-1} c
    with U = sum_i a_point_i k_i k_i^T + int a_quad(t) k(t) k(t)^T dt and
    c = sum_i b_point_i k_i + int b_quad(t) k(t) dt. Any replication scaling
    (number of windows / number of events) is already folded into the
    quadrature densities.
    """

    points: np.ndarray
    a_point: np.ndarray
    b_point: np.ndarray
    quad: QuadratureGrid
    a_quad: np.ndarray
    b_quad: np.ndarray
    domain: float


def assemble_system(stats: ComponentStats, k_points: np.ndarray, k_quad: np.ndarray):
    """(U, c) from precomputed kernel matrices at the stat locations."""
    wa = stats.quad.weights * stats.a_quad
    wb = stats.quad.weights * stats.b_quad
    u_mat = k_quad.T @ (wa[:, None] * k_quad)
    c_vec = k_quad.T @ wb
    if stats.points.size:
        u_mat = u_mat + k_points.T @ (stats.a_point[:, None] * k_points)
        c_vec = c_vec + k_points.T @ stats.b_point
    return u_mat, c_vec


def solve_gaussian_update(gm: GramMatrix, u_mat: np.ndarray, c_vec: np.ndarray):
    """(mean, cov) of the penalized-Gaussian update; cov = K (U+K)^{-1} K."""
    system = u_mat + gm.values
    try:
        chol = np.linalg.cholesky(system)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("GP update system U + K is not positive definite") from None
    mean = gm.values @ cho_solve((chol, True), c_vec)
    cov = gm.values @ cho_solve((chol, True), gm.values)
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def _profile_objective(
    stats: ComponentStats,
    grid: InducingGrid,
    hp: KernelHyperparams,
    kind: str,
    u_fixed: np.ndarray | None = None,
) -> float:
    """Theta objective for the hyperparameter refresh, coefficients frozen.

    EM (``u_fixed`` required): the expected complete-data objective with the
    inducing values held at their current estimate — linear/quadratic data
    terms in the reprojected f, the RKHS penalty, and the prior normalizer
    -0.5 log|K|. VI: the evidence bound with the Gaussian factor re-optimized
    for the candidate theta, 0.5 c^T (U+K)^{-1} c + 0.5 log|K| - 0.5 log|U+K|.
    """
    try:
        gm = gram(grid, hp)
    except SingularMatrixError:
        return -np.inf
    k_points = se_cross(stats.points, grid.points, hp) if stats.points.size else np.empty((0, grid.count))
    k_quad = se_cross(stats.quad.nodes, grid.points, hp)
    if kind == "em":
        if u_fixed is None:
            raise ValueError("the EM theta objective needs the current inducing values")
        alpha = gm.solve(u_fixed)
        f_pts = k_points @ alpha
        f_q = k_quad @ alpha
        w = stats.quad.weights
        value = float(stats.b_point @ f_pts) + float(w @ (stats.b_quad * f_q))
        value -= 0.5 * (float(stats.a_point @ f_pts**2) + float(w @ (stats.a_quad * f_q**2)))
        value -= 0.5 * float(u_fixed @ alpha) + 0.5 * gm.logdet()
        return value if np.isfinite(value) else -np.inf
    u_mat, c_vec = assemble_system(stats, k_points, k_quad)
    system = u_mat + gm.values
    try:
        chol = np.linalg.cholesky(system)
    except np.linalg.LinAlgError:
        return -np.inf
    value = 0.5 * float(c_vec @ cho_solve((chol, True), c_vec))
    value += 0.5 * gm.logdet() - 2.0 * float(np.sum(np.log(np.diag(chol))))
    return value


def _compact_stats(stats: ComponentStats, n_bins: int = _SEARCH_BINS) -> ComponentStats:
    """Histogram the Dirac part onto bin centers to speed up the theta search."""
    if stats.points.size <= n_bins:
        return stats
    edges = np.linspace(0.0, stats.domain, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, stats.points, side="right") - 1, 0, n_bins - 1)
    a = np.bincount(idx, weights=stats.a_point, minlength=n_bins)
    b = np.bincount(idx, weights=stats.b_point, minlength=n_bins)
    keep = (a != 0.0) | (b != 0.0)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return replace(stats, points=centers[keep], a_point=a[keep], b_point=b[keep])


def search_theta(
    stats: ComponentStats,
    grid: InducingGrid,
    hp: KernelHyperparams,
    kind: str,
    extra_starts: tuple[KernelHyperparams, ...] = (),
    u_fixed: np.ndarray | None = None,
) -> tuple[KernelHyperparams, bool]:
    """Bounded derivative-free refresh of (theta0, theta1) for one component.

    Runs Nelder-Mead in log-theta space on compacted statistics, then checks
    the exact objective at the winner; the incumbent is kept (and the move
    flagged as rejected) unless the exact objective does not decrease.
    """
    compact = _compact_stats(stats)
    lo, hi = np.log(THETA_BOUNDS[0]), np.log(THETA_BOUNDS[1])

    def negative(x):
        t0, t1 = np.exp(np.clip(x, lo, hi))
        val = _profile_objective(compact, grid, KernelHyperparams(t0, t1), kind, u_fixed)
        return -val if np.isfinite(val) else 1e300

    best_x, best_val = None, np.inf
    starts = (hp,) + tuple(extra_starts)
    for start in starts:
        x0 = np.log([start.theta0, start.theta1])
        res = minimize(
            negative,
            x0,
            method="Nelder-Mead",
            bounds=[(lo, hi), (lo, hi)],
            options={"maxfev": 200, "xatol": 1e-3, "fatol": 1e-10},
        )
        if res.fun < best_val:
            best_val, best_x = res.fun, res.x
    if best_x is None:
        return hp, False
    t0, t1 = np.exp(np.clip(best_x, lo, hi))
    candidate = KernelHyperparams(float(t0), float(t1))
    j_old = _profile_objective(stats, grid, hp, kind, u_fixed)
    j_new = _profile_objective(stats, grid, candidate, kind, u_fixed)
    if np.isfinite(j_new) and j_new >= j_old - 1e-9 - 1e-12 * abs(j_old):
        return candidate, True
    return hp, False


def auto_theta(config: FitConfig, grid: InducingGrid) -> KernelHyperparams:
    """Initial kernel parameters; theta1 defaults to 1/spacing^2 of the grid."""
    theta1 = config.theta1_init
    if theta1 is None:
        theta1 = 1.0 / grid.spacing**2
    theta1 = float(np.clip(theta1, *THETA_BOUNDS))
    theta0 = float(np.clip(config.theta0_init, *THETA_BOUNDS))
    return KernelHyperparams(theta0, theta1)


def component_quads(config: FitConfig) -> tuple[QuadratureGrid, QuadratureGrid]:
    return (
        gauss_legendre(config.quad_order_T, 0.0, config.T),
        gauss_legendre(config.quad_order_Tphi, 0.0, config.T_phi),
    )


def relative_change(new: float, old: float) -> float:
    return abs(new - old) / max(1.0, abs(old))
