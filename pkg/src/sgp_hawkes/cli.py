"""Batch command-line front end: simulate | fit | eval | bench.

Every command reads one JSON config (--config), writes its artifacts plus a
``config_echo.json`` into --out, and is fully reproducible from config + seed.
Exit codes: 0 success, 1 usage or I/O problem, 2 numerical failure or
non-convergence (partial artifacts are still written and flagged).

The HAWKES_SGP_THREADS environment variable caps the worker pool used for
per-replicate work (simulation, holdout scoring); timings in ``bench`` always
run serially.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from statistics import median

import numpy as np

from .em import fit_em
from .evaluation import est_err, ks_statistic, qq_pairs, rescale, test_ll
from .fitbase import FitConfig
from .kernels import SingularMatrixError
from .mle import fit_mle
from .process import (
    CASE_T,
    CASE_T_PHI,
    EventSequence,
    NonFiniteLikelihoodError,
    case1_rates,
    case2_rates,
    read_events_csv,
    read_manifest,
    simulate_thinning,
    table_rates,
    write_events_csv,
    write_manifest,
)
from .quadrature import gauss_legendre
from .serialize import load_model, rates_for_eval, report_to_dict, save_json, save_model
from .vi import fit_vi

_NUMERICAL_ERRORS = (
    SingularMatrixError,
    NonFiniteLikelihoodError,
    FloatingPointError,
    RuntimeError,
)

_FIT_KEYS = {
    "S_mu",
    "S_phi",
    "quad_order_T",
    "quad_order_Tphi",
    "max_iter",
    "tol",
    "hyper_refresh_every",
    "theta0_init",
    "theta1_init",
    "seed",
    "gh_order",
    "eval_grid",
    "fix_variance",
}


class CliError(Exception):
    """Usage or I/O problem; maps to exit code 1."""


def _pool_size(n_tasks: int) -> int:
    raw = os.environ.get("HAWKES_SGP_THREADS")
    if raw is not None:
        try:
            cap = int(raw)
        except ValueError:
            raise CliError(f"HAWKES_SGP_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise CliError("HAWKES_SGP_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def _parallel_map(fn, items):
    items = list(items)
    workers = _pool_size(len(items))
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _check_keys(config: dict, allowed: set, context: str) -> None:
    unknown = set(config) - allowed
    if unknown:
        raise CliError(f"unknown {context} config keys: {', '.join(sorted(unknown))}")


def _get_int(config: dict, key: str, default: int, minimum: int) -> int:
    value = config.get(key, default)
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise CliError(f"config key '{key}' must be an integer >= {minimum}, got {value!r}")
    return value


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_config(args) -> dict:
    path = Path(args.config)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    try:
        from json import loads

        config = loads(path.read_text())
    except ValueError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def _echo_config(out: Path, command: str, config: dict) -> None:
    save_json(out / "config_echo.json", {"command": command, "config": config})


def _preset_rates(name: str, t_window: float):
    if name == "case1":
        return case1_rates()
    if name == "case2":
        return case2_rates(t_window)
    raise CliError(f"unknown preset {name!r}; choose case1 or case2")


def _load_split(data_dir: Path, split: str, limit: int | None = None):
    manifest = read_manifest(data_dir / "manifest.json")
    paths = sorted(data_dir.glob(f"{split}_*.csv"))
    if limit is not None:
        paths = paths[:limit]
    seqs = [read_events_csv(p, manifest["T"]) for p in paths]
    return manifest, seqs


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    config = _load_config(args)
    _check_keys(
        config, {"preset", "rates", "T", "T_phi", "n_train", "n_test", "seed"}, "simulate"
    )
    out = _out_dir(args)
    n_train = _get_int(config, "n_train", 100, 0)
    n_test = _get_int(config, "n_test", 10, 0)
    seed = _get_int(config, "seed", 0, 0)
    preset = config.get("preset")
    if preset is not None:
        t_window = float(config.get("T", CASE_T))
        rates = _preset_rates(preset, t_window)
        t_phi = rates.T_phi
    elif "rates" in config:
        tables = config["rates"]
        for key in ("mu_t", "mu_value", "phi_tau", "phi_value"):
            if key not in tables:
                raise CliError(f"custom rates need key '{key}'")
        if "T" not in config or "T_phi" not in config:
            raise CliError("custom rates need explicit T and T_phi")
        t_window = float(config["T"])
        t_phi = float(config["T_phi"])
        try:
            rates = table_rates(
                tables["mu_t"], tables["mu_value"], tables["phi_tau"], tables["phi_value"], t_phi
            )
        except ValueError as exc:
            raise CliError(str(exc)) from None
    else:
        raise CliError("simulate config needs either 'preset' or 'rates'")
    _echo_config(out, "simulate", config)

    def one(task):
        split, index, seed_k = task
        seq = simulate_thinning(rates, t_window, seed_k)
        write_events_csv(out / f"{split}_{index:03d}.csv", seq)
        return len(seq)

    tasks = [("train", i, seed + i) for i in range(n_train)]
    tasks += [("test", j, seed + n_train + j) for j in range(n_test)]
    counts = _parallel_map(one, tasks)
    write_manifest(
        out / "manifest.json",
        t_window,
        t_phi,
        n_train=n_train,
        n_test=n_test,
        preset=preset,
        seed=seed,
        n_events_total=int(sum(counts)),
    )
    print(f"wrote {n_train} train + {n_test} test sequences to {out}")
    return 0


# ---------------------------------------------------------------------------
# fit


def _write_estimates(path: Path, grid, values, std=None) -> None:
    lines = ["x,value" + (",std" if std is not None else "")]
    for i in range(len(grid)):
        row = f"{grid[i]:.17g},{values[i]:.17g}"
        if std is not None:
            row += f",{std[i]:.17g}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n")


def cmd_fit(args) -> int:
    config = _load_config(args)
    _check_keys(config, _FIT_KEYS | {"method", "data", "split", "max_sequences"}, "fit")
    method = config.get("method")
    if method not in ("em", "vi", "mle"):
        raise CliError(f"fit method must be one of em, vi, mle; got {method!r}")
    if "data" not in config:
        raise CliError("fit config needs a 'data' directory")
    out = _out_dir(args)
    limit = config.get("max_sequences")
    if limit is not None:
        limit = _get_int(config, "max_sequences", 0, 1)
    manifest, seqs = _load_split(Path(config["data"]), config.get("split", "train"), limit)
    if not seqs:
        raise CliError(f"no {config.get('split', 'train')}_*.csv sequences in {config['data']}")
    _echo_config(out, "fit", config)

    if method == "mle":
        model, report = fit_mle(seqs, t_phi_report=manifest["T_phi"])
    else:
        engine_keys = {k: config[k] for k in _FIT_KEYS if k in config}
        fit_config = FitConfig(T=manifest["T"], T_phi=manifest["T_phi"], **engine_keys)
        model, report = (fit_em if method == "em" else fit_vi)(seqs, fit_config)

    save_model(out / "model.json", model)
    save_json(out / "report.json", report_to_dict(report))
    _write_estimates(out / "estimates_mu.csv", report.grid_mu, report.mu_hat, report.mu_std)
    _write_estimates(out / "estimates_phi.csv", report.grid_phi, report.phi_hat, report.phi_std)
    if not report.converged:
        print(f"{method} fit did not converge in {report.n_iter} iterations", file=sys.stderr)
        return 2
    print(f"{method} fit converged in {report.n_iter} iterations ({report.runtime_seconds:.1f}s)")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    config = _load_config(args)
    _check_keys(
        config, {"model", "data", "split", "truth_preset", "quad_order", "seed"}, "eval"
    )
    for key in ("model", "data"):
        if key not in config:
            raise CliError(f"eval config needs key '{key}'")
    out = _out_dir(args)
    model_path = Path(config["model"])
    if not model_path.exists():
        raise CliError(f"model file not found: {model_path}")
    model = load_model(model_path)
    manifest, seqs = _load_split(Path(config["data"]), config.get("split", "test"))
    if not seqs:
        raise CliError(f"no holdout sequences found in {config['data']}")
    _echo_config(out, "eval", config)
    t_window, t_phi = float(manifest["T"]), float(manifest["T_phi"])
    rates = rates_for_eval(model, t_phi=t_window)
    quad_order = _get_int(config, "quad_order", 200, 2)
    quad = gauss_legendre(quad_order, 0.0, t_window)

    lls = _parallel_map(lambda s: test_ll(rates, s, quad), seqs)
    samples = _parallel_map(lambda s: rescale(rates, s, quad), seqs)
    z_all = np.concatenate([s.z for s in samples])
    pooled = samples[0].__class__(
        z=z_all,
        tau=np.concatenate([s.tau for s in samples]),
        lam=np.empty(0),
        n_clamped=sum(s.n_clamped for s in samples),
    )
    theoretical, empirical = qq_pairs(pooled)
    lines = ["theoretical,empirical"] + [
        f"{t:.17g},{e:.17g}" for t, e in zip(theoretical, empirical)
    ]
    (out / "qq.csv").write_text("\n".join(lines) + "\n")

    ks_distance = ks_p = None
    if z_all.size:
        ks_distance, ks_p = ks_statistic(pooled)

    est_mu = est_phi = None
    preset = config.get("truth_preset", manifest.get("preset"))
    if preset is not None:
        truth = _preset_rates(preset, t_window)
        est_mu = est_err(rates.mu, truth.mu, np.linspace(0.0, t_window, 200))
        est_phi = est_err(rates.phi, truth.phi, np.linspace(0.0, t_phi, 200))

    metrics = {
        "test_ll_mean": float(np.mean(lls)),
        "test_ll_sum": float(np.sum(lls)),
        "est_err_mu": est_mu,
        "est_err_phi": est_phi,
        "ks_distance": ks_distance,
        "ks_p": ks_p,
        "n_sequences": len(seqs),
        "n_rescaled": int(z_all.size),
        "n_clamped": pooled.n_clamped,
    }
    save_json(out / "metrics.json", metrics)
    print(f"test_ll_mean={metrics['test_ll_mean']:.4f} over {len(seqs)} sequences")
    return 0


# ---------------------------------------------------------------------------
# bench


def _bench_sequence(preset: str, n_events: int, seed: int) -> EventSequence:
    """First n_events of a preset simulation, window cut at the last event."""
    t_window = max(n_events / 2.0, 10.0)
    for _ in range(4):
        rates = _preset_rates(preset, t_window)
        seq = simulate_thinning(rates, t_window, seed)
        if len(seq) >= n_events:
            times = seq.times[:n_events]
            return EventSequence(times, float(times[-1]))
        t_window *= 2.0
    raise RuntimeError(f"could not generate {n_events} events from preset {preset}")


def cmd_bench(args) -> int:
    config = _load_config(args)
    _check_keys(
        config,
        {"method", "sizes", "iters", "repeats", "preset", "seed", "S_mu", "S_phi",
         "quad_order_T", "quad_order_Tphi", "gh_order"},
        "bench",
    )
    method = config.get("method", "em")
    if method not in ("em", "vi"):
        raise CliError(f"bench method must be em or vi, got {method!r}")
    sizes = config.get("sizes")
    if not isinstance(sizes, list) or not sizes or any(
        not isinstance(n, int) or isinstance(n, bool) or n < 10 for n in sizes
    ):
        raise CliError("bench config needs 'sizes': a list of integers >= 10")
    iters = _get_int(config, "iters", 50, 1)
    repeats = _get_int(config, "repeats", 1, 1)
    preset = config.get("preset", "case1")
    seed = _get_int(config, "seed", 0, 0)
    out = _out_dir(args)
    _echo_config(out, "bench", config)

    fitter = fit_em if method == "em" else fit_vi
    rows = []
    for idx, n_events in enumerate(sizes):
        times = []
        for r in range(repeats):
            seq = _bench_sequence(preset, n_events, seed + 101 * idx + r)
            fit_config = FitConfig(
                T=seq.T,
                T_phi=CASE_T_PHI,
                max_iter=iters,
                tol=0.0,
                hyper_refresh_every=0,
                S_mu=_get_int(config, "S_mu", 10, 2),
                S_phi=_get_int(config, "S_phi", 10, 2),
            )
            start = time.perf_counter()
            fitter(seq, fit_config)
            times.append(time.perf_counter() - start)
        rows.append((n_events, median(times)))
        print(f"n={n_events}: {rows[-1][1]:.3f}s median of {repeats} ({iters} iterations)")
    lines = ["n,seconds"] + [f"{n},{s:.17g}" for n, s in rows]
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sgp-hawkes", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in (
        ("simulate", cmd_simulate),
        ("fit", cmd_fit),
        ("eval", cmd_eval),
        ("bench", cmd_bench),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
