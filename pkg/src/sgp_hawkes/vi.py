"""Mean-field variational inference for the sigmoid-GP Hawkes model.

The posterior is factorized into Gamma factors for the rate bounds, Gaussian
factors for the inducing values of both GP components, Polya-Gamma factors at
events/pairs, a marked-Poisson factor for the thinned points, and a
multinomial branching factor. One sweep applies the closed-form coordinate
updates in the order: PG tilts, latent-Poisson rates, Gamma, Gaussian,
branching. Every update is a pure function of the *other* factors, so
re-applying any single update is exactly idempotent.

The convergence monitor is a negative variational free energy in which the
PG and latent-Poisson factors are collapsed to their optimal forms (their
entropy terms cancel analytically, leaving the masses and -E[lambda*]*volume);
constant reference-measure offsets are dropped, so the value is useful for
trend/monotonicity only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import digamma, gammaln, xlogy

from .fitbase import (
    BranchingPosterior,
    ComponentCache,
    ComponentStats,
    Dataset,
    FitConfig,
    FitReport,
    assemble_system,
    build_dataset,
    normalize_branching,
    relative_change,
    search_theta,
    solve_gaussian_update,
    uniform_branching,
)
from .em import build_caches, refresh_hyperparams
from .kernels import InducingGrid, KernelHyperparams, gram, se_cross
from .pg import pg_mean
from .process import EventSequence, RateFunctions
from .quadrature import expected_log_sigmoid, expected_sigmoid_moments

_COV_FLOOR = 1e-12  # covariance scale used by the fix_variance debug mode


@dataclass(frozen=True)
class GaussianFactor:
    """q(u) = N(mean, cov) over one component's inducing values."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class GammaFactor:
    """q(lambda*) = Gamma(alpha, beta) with rate parametrization E = alpha/beta."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and np.isfinite(self.alpha) and self.beta > 0 and np.isfinite(self.beta)):
            raise ValueError(f"Gamma factor parameters must be positive finite, got {self}")

    def mean(self) -> float:
        return self.alpha / self.beta

    def mean_log(self) -> float:
        return float(digamma(self.alpha)) - np.log(self.beta)

    def geometric_mean(self) -> float:
        """exp(E[log lambda*]) — the intensity scale used by the updates."""
        return float(np.exp(self.mean_log()))


@dataclass(frozen=True)
class ViModel:
    gp_mu: GaussianFactor
    gp_phi: GaussianFactor
    lam_mu: GammaFactor
    lam_phi: GammaFactor
    grid_mu: InducingGrid
    grid_phi: InducingGrid
    hp_mu: KernelHyperparams
    hp_phi: KernelHyperparams
    T: float
    T_phi: float


@dataclass(frozen=True)
class PgTilts:
    """Tilt c = sqrt(mean^2 + var) of the PG factors at events and pairs."""

    events: np.ndarray
    pairs: np.ndarray


@dataclass(frozen=True)
class PoissonRates:
    """Optimal thinned-process rates on the quadrature grids (one window/event)."""

    marginal_mu: np.ndarray
    first_mu: np.ndarray
    mass_mu: float
    marginal_phi: np.ndarray
    first_phi: np.ndarray
    mass_phi: float


@dataclass(frozen=True)
class _Projections:
    """Projected marginals of the Gaussian factors at all fit locations."""

    mean_ev: np.ndarray
    var_ev: np.ndarray
    mean_pair: np.ndarray
    var_pair: np.ndarray
    mean_qmu: np.ndarray
    var_qmu: np.ndarray
    mean_qphi: np.ndarray
    var_qphi: np.ndarray


def _project(model: ViModel, caches: dict[str, ComponentCache]) -> _Projections:
    m_ev, v_ev, m_qm, v_qm = caches["mu"].project_meanvar(model.gp_mu.mean, model.gp_mu.cov)
    m_pr, v_pr, m_qp, v_qp = caches["phi"].project_meanvar(model.gp_phi.mean, model.gp_phi.cov)
    return _Projections(m_ev, v_ev, m_pr, v_pr, m_qm, v_qm, m_qp, v_qp)


def _tilt(mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return np.sqrt(mean * mean + var)


def _poisson_rate(lam_geo: float, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """lambda~ * sigma(-c) * exp((c - mean)/2) with c the PG tilt, stably."""
    c = _tilt(mean, var)
    return lam_geo * np.exp(0.5 * (c - mean) - np.logaddexp(0.0, c))


def vi_pg_update(model: ViModel, data: Dataset, caches: dict[str, ComponentCache]) -> PgTilts:
    proj = _project(model, caches)
    return PgTilts(
        events=_tilt(proj.mean_ev, proj.var_ev), pairs=_tilt(proj.mean_pair, proj.var_pair)
    )


def vi_poisson_update(model: ViModel, caches: dict[str, ComponentCache]) -> PoissonRates:
    proj = _project(model, caches)
    return _poisson_from(model, proj, caches)


def _poisson_from(model: ViModel, proj: _Projections, caches) -> PoissonRates:
    rate_mu = _poisson_rate(model.lam_mu.geometric_mean(), proj.mean_qmu, proj.var_qmu)
    rate_phi = _poisson_rate(model.lam_phi.geometric_mean(), proj.mean_qphi, proj.var_qphi)
    tilt_mu = _tilt(proj.mean_qmu, proj.var_qmu)
    tilt_phi = _tilt(proj.mean_qphi, proj.var_qphi)
    return PoissonRates(
        marginal_mu=rate_mu,
        first_mu=rate_mu * pg_mean(1.0, tilt_mu),
        mass_mu=float(caches["mu"].quad.weights @ rate_mu),
        marginal_phi=rate_phi,
        first_phi=rate_phi * pg_mean(1.0, tilt_phi),
        mass_phi=float(caches["phi"].quad.weights @ rate_phi),
    )


def vi_lambda_update(
    branching: BranchingPosterior, rates: PoissonRates, data: Dataset
) -> tuple[GammaFactor, GammaFactor]:
    r = data.n_sequences
    alpha_mu = float(np.sum(branching.background)) + r * rates.mass_mu
    lam_mu = GammaFactor(max(alpha_mu, 1e-12), r * data.T)
    if data.n_events == 0:
        return lam_mu, None
    alpha_phi = float(np.sum(branching.parent)) + data.n_events * rates.mass_phi
    lam_phi = GammaFactor(max(alpha_phi, 1e-12), data.n_events * data.T_phi)
    return lam_mu, lam_phi


def _vi_stats(
    data: Dataset,
    caches: dict[str, ComponentCache],
    tilts: PgTilts,
    branching: BranchingPosterior,
    rates: PoissonRates,
) -> tuple[ComponentStats, ComponentStats]:
    r = data.n_sequences
    n = data.n_events
    stats_mu = ComponentStats(
        points=data.events,
        a_point=pg_mean(1.0, tilts.events) * branching.background,
        b_point=0.5 * branching.background,
        quad=caches["mu"].quad,
        a_quad=r * rates.first_mu,
        b_quad=-0.5 * r * rates.marginal_mu,
        domain=data.T,
    )
    stats_phi = ComponentStats(
        points=data.lag,
        a_point=pg_mean(1.0, tilts.pairs) * branching.parent,
        b_point=0.5 * branching.parent,
        quad=caches["phi"].quad,
        a_quad=n * rates.first_phi,
        b_quad=-0.5 * n * rates.marginal_phi,
        domain=data.T_phi,
    )
    return stats_mu, stats_phi


def vi_gp_update(
    tilts: PgTilts,
    branching: BranchingPosterior,
    rates: PoissonRates,
    data: Dataset,
    caches: dict[str, ComponentCache],
) -> tuple[GaussianFactor, GaussianFactor]:
    stats_mu, stats_phi = _vi_stats(data, caches, tilts, branching, rates)
    u_mat, c_vec = assemble_system(stats_mu, caches["mu"].k_points, caches["mu"].k_quad)
    mean, cov = solve_gaussian_update(caches["mu"].gm, u_mat, c_vec)
    gp_mu = GaussianFactor(mean, cov)
    u_mat, c_vec = assemble_system(stats_phi, caches["phi"].k_points, caches["phi"].k_quad)
    mean, cov = solve_gaussian_update(caches["phi"].gm, u_mat, c_vec)
    return gp_mu, GaussianFactor(mean, cov)


def vi_branching_update(
    model: ViModel, data: Dataset, caches: dict[str, ComponentCache], gh_order: int = 30
) -> BranchingPosterior:
    proj = _project(model, caches)
    els_ev = expected_log_sigmoid(proj.mean_ev, proj.var_ev, gh_order)
    els_pair = expected_log_sigmoid(proj.mean_pair, proj.var_pair, gh_order)
    return _branching_from(model, els_ev, els_pair, data)


def _branching_from(model: ViModel, els_ev, els_pair, data: Dataset) -> BranchingPosterior:
    bg = model.lam_mu.geometric_mean() * np.exp(els_ev)
    pair = model.lam_phi.geometric_mean() * np.exp(els_pair)
    return normalize_branching(bg, pair, data.child, data.n_events)


def _gaussian_kl(factor: GaussianFactor, gm) -> float:
    """KL(q(u) || N(0, K)) with K the jittered Gram matrix."""
    s = factor.mean.size
    half = gm.half_solve(factor.mean)
    quad_term = float(half @ half)
    trace_term = float(np.trace(gm.solve(factor.cov)))
    sign, logdet_cov = np.linalg.slogdet(factor.cov)
    if sign <= 0:
        raise FloatingPointError("Gaussian factor covariance lost positive definiteness")
    return 0.5 * (quad_term + trace_term - s + gm.logdet() - logdet_cov)


def _gamma_elbo_term(factor: GammaFactor) -> float:
    """E[log p(lambda)] - E[log q] under the improper prior p = 1/lambda."""
    return factor.alpha + float(gammaln(factor.alpha)) - factor.alpha * float(digamma(factor.alpha))


def vi_monitor(
    model: ViModel,
    branching: BranchingPosterior,
    data: Dataset,
    caches: dict[str, ComponentCache],
    gh_order: int = 30,
) -> float:
    """Negative variational free energy surrogate at the current factors."""
    proj = _project(model, caches)
    els_ev = expected_log_sigmoid(proj.mean_ev, proj.var_ev, gh_order)
    els_pair = expected_log_sigmoid(proj.mean_pair, proj.var_pair, gh_order)
    rates = _poisson_from(model, proj, caches)
    return _monitor_from(model, branching, els_ev, els_pair, rates, data, caches)


def _monitor_from(model, branching, els_ev, els_pair, rates, data, caches) -> float:
    r = data.n_sequences
    n = data.n_events
    value = float(branching.background @ (model.lam_mu.mean_log() + els_ev)) if n else 0.0
    value -= float(np.sum(xlogy(branching.background, branching.background)))
    if data.n_pairs:
        value += float(branching.parent @ (model.lam_phi.mean_log() + els_pair))
        value -= float(np.sum(xlogy(branching.parent, branching.parent)))
    value += r * rates.mass_mu - model.lam_mu.mean() * r * data.T
    value += n * rates.mass_phi - model.lam_phi.mean() * n * data.T_phi
    value -= _gaussian_kl(model.gp_mu, caches["mu"].gm)
    value -= _gaussian_kl(model.gp_phi, caches["phi"].gm)
    value += _gamma_elbo_term(model.lam_mu) + _gamma_elbo_term(model.lam_phi)
    return value


def init_vi_model(data: Dataset, caches: dict[str, ComponentCache], config: FitConfig) -> ViModel:
    """Prior Gaussian factors, Gamma factors matching the EM initialization."""
    cov_scale = _COV_FLOOR if config.fix_variance else 1.0
    gp_mu = GaussianFactor(np.zeros(caches["mu"].grid.count), cov_scale * caches["mu"].gm.values)
    gp_phi = GaussianFactor(np.zeros(caches["phi"].grid.count), cov_scale * caches["phi"].gm.values)
    lam_mu = GammaFactor(max(2.0 * data.n_events, 0.5), data.n_sequences * data.T)
    lam_phi = GammaFactor(max(float(data.n_events), 0.5), max(data.n_events, 1) * data.T_phi)
    return ViModel(
        gp_mu=gp_mu,
        gp_phi=gp_phi,
        lam_mu=lam_mu,
        lam_phi=lam_phi,
        grid_mu=caches["mu"].grid,
        grid_phi=caches["phi"].grid,
        hp_mu=caches["mu"].hp,
        hp_phi=caches["phi"].hp,
        T=data.T,
        T_phi=data.T_phi,
    )


def model_rates(model: ViModel, gh_order: int = 30) -> RateFunctions:
    """Posterior-mean rates E[lambda*] E[sigma(f(.))] of a fitted VI model."""
    gm_mu = gram(model.grid_mu, model.hp_mu)
    gm_phi = gram(model.grid_phi, model.hp_phi)

    def make(comp_grid, hp, gm, factor, lam):
        alpha = gm.solve(factor.mean)
        w = gm.solve(gm.solve(factor.cov).T)

        def fn(x):
            x = np.asarray(x, dtype=float)
            kx = se_cross(x.ravel(), comp_grid.points, hp)
            mean = kx @ alpha
            var = np.maximum(np.einsum("ns,ns->n", kx @ w, kx), 0.0)
            s1, _ = expected_sigmoid_moments(mean, var, gh_order)
            return (lam.mean() * s1).reshape(x.shape)

        return fn

    mu_fn = make(model.grid_mu, model.hp_mu, gm_mu, model.gp_mu, model.lam_mu)
    phi_inner = make(model.grid_phi, model.hp_phi, gm_phi, model.gp_phi, model.lam_phi)

    def phi(tau):
        tau = np.asarray(tau, dtype=float)
        return np.where((tau > 0.0) & (tau <= model.T_phi), phi_inner(tau), 0.0)

    return RateFunctions(mu=mu_fn, phi=phi, T_phi=model.T_phi)


def posterior_bands(model: ViModel, grid: np.ndarray, component: str, gh_order: int = 30):
    """(mean, std) of lambda* sigma(f(x)) pointwise under the fitted factors.

    Gamma and Gaussian uncertainties combine multiplicatively:
    var = E[lambda*^2] E[sigma^2] - (E[lambda*] E[sigma])^2.
    """
    if component == "mu":
        grid_c, hp, factor, lam = model.grid_mu, model.hp_mu, model.gp_mu, model.lam_mu
    else:
        grid_c, hp, factor, lam = model.grid_phi, model.hp_phi, model.gp_phi, model.lam_phi
    gm = gram(grid_c, hp)
    alpha = gm.solve(factor.mean)
    w = gm.solve(gm.solve(factor.cov).T)
    kx = se_cross(np.asarray(grid, dtype=float), grid_c.points, hp)
    mean_f = kx @ alpha
    var_f = np.maximum(np.einsum("ns,ns->n", kx @ w, kx), 0.0)
    s1, s2 = expected_sigmoid_moments(mean_f, var_f, gh_order)
    lam_m1 = lam.mean()
    lam_m2 = lam.alpha * (lam.alpha + 1.0) / (lam.beta**2)
    mean = lam_m1 * s1
    var = np.maximum(lam_m2 * s2 - mean * mean, 0.0)
    if component == "phi":
        inside = (grid > 0.0) & (grid <= model.T_phi)
        mean = np.where(inside, mean, 0.0)
        var = np.where(inside, var, 0.0)
    return mean, np.sqrt(var)


def fit_vi(
    seqs: EventSequence | Sequence[EventSequence], config: FitConfig
) -> tuple[ViModel, FitReport]:
    """Coordinate-ascent sweeps to convergence of the free-energy monitor."""
    t_start = time.perf_counter()
    data = build_dataset(seqs, config.T_phi)
    if abs(data.T - config.T) > 1e-9 * max(1.0, config.T):
        raise ValueError(f"config T={config.T} does not match sequence window T={data.T}")
    caches = build_caches(data, config)
    model = init_vi_model(data, caches, config)
    proj = _project(model, caches)
    if data.n_events:
        els_ev = expected_log_sigmoid(proj.mean_ev, proj.var_ev, config.gh_order)
        els_pair = expected_log_sigmoid(proj.mean_pair, proj.var_pair, config.gh_order)
        branching = _branching_from(model, els_ev, els_pair, data)
    else:
        branching = uniform_branching(data)
    rates = _poisson_from(model, proj, caches)
    trace: list[float] = []
    hyper_history: list[dict] = []
    warnings: list[str] = []
    converged = False
    previous = None
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        tilts = PgTilts(
            events=_tilt(proj.mean_ev, proj.var_ev), pairs=_tilt(proj.mean_pair, proj.var_pair)
        )
        lam_mu, lam_phi = vi_lambda_update(branching, rates, data)
        model = replace(model, lam_mu=lam_mu, lam_phi=lam_phi or model.lam_phi)
        if data.n_events:
            gp_mu, gp_phi = vi_gp_update(tilts, branching, rates, data, caches)
        else:
            stats_mu, _ = _vi_stats(data, caches, tilts, branching, rates)
            u_mat, c_vec = assemble_system(stats_mu, caches["mu"].k_points, caches["mu"].k_quad)
            mean, cov = solve_gaussian_update(caches["mu"].gm, u_mat, c_vec)
            gp_mu, gp_phi = GaussianFactor(mean, cov), model.gp_phi
        if config.fix_variance:
            gp_mu = GaussianFactor(gp_mu.mean, _COV_FLOOR * caches["mu"].gm.values)
            gp_phi = GaussianFactor(gp_phi.mean, _COV_FLOOR * caches["phi"].gm.values)
        model = replace(model, gp_mu=gp_mu, gp_phi=gp_phi)

        if config.hyper_refresh_every and iteration % config.hyper_refresh_every == 0:
            stats_mu, stats_phi = _vi_stats(data, caches, tilts, branching, rates)
            specs = [("mu", stats_mu, "gp_mu", "hp_mu")]
            if data.n_events:
                specs.append(("phi", stats_phi, "gp_phi", "hp_phi"))
            record = {"iteration": iteration}
            for name, stats, gp_attr, hp_attr in specs:
                hp_new, accepted = refresh_hyperparams(stats, caches[name].grid, caches[name].hp, kind="vi")
                if accepted and hp_new != caches[name].hp:
                    caches[name] = caches[name].with_hp(hp_new)
                    u_mat, c_vec = assemble_system(stats, caches[name].k_points, caches[name].k_quad)
                    mean, cov = solve_gaussian_update(caches[name].gm, u_mat, c_vec)
                    if config.fix_variance:
                        cov = _COV_FLOOR * caches[name].gm.values
                    model = replace(model, **{gp_attr: GaussianFactor(mean, cov), hp_attr: hp_new})
                record[name] = {
                    "theta0": caches[name].hp.theta0,
                    "theta1": caches[name].hp.theta1,
                    "accepted": accepted,
                }
                if not accepted:
                    warnings.append(f"hyperparameter search for {name} kept theta at iteration {iteration}")
            hyper_history.append(record)

        proj = _project(model, caches)
        els_ev = expected_log_sigmoid(proj.mean_ev, proj.var_ev, config.gh_order)
        els_pair = expected_log_sigmoid(proj.mean_pair, proj.var_pair, config.gh_order)
        if data.n_events:
            branching = _branching_from(model, els_ev, els_pair, data)
        rates = _poisson_from(model, proj, caches)
        monitor = _monitor_from(model, branching, els_ev, els_pair, rates, data, caches)
        if not np.isfinite(monitor):
            raise FloatingPointError(f"VI monitor became non-finite at iteration {iteration}")
        trace.append(monitor)
        if previous is not None and relative_change(monitor, previous) < config.tol:
            converged = True
            break
        previous = monitor

    grid_mu = np.linspace(0.0, data.T, config.eval_grid)
    grid_phi = np.linspace(0.0, data.T_phi, config.eval_grid)
    mu_hat, mu_std = posterior_bands(model, grid_mu, "mu", config.gh_order)
    phi_hat, phi_std = posterior_bands(model, grid_phi, "phi", config.gh_order)
    report = FitReport(
        method="vi",
        converged=converged,
        n_iter=iteration,
        runtime_seconds=time.perf_counter() - t_start,
        objective_trace=trace,
        hyper_history=hyper_history,
        warnings=warnings,
        grid_mu=grid_mu,
        mu_hat=mu_hat,
        grid_phi=grid_phi,
        phi_hat=phi_hat,
        mu_std=mu_std,
        phi_std=phi_std,
    )
    return model, report
