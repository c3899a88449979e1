"""Command-line driver.

Subcommands: sample-bridge, pm-mh, alt-mcmc, validate-ou, pi-regression,
estimate-hyperbolic, simulate-data.  Options come from an optional JSON
config file (--config) overridden by flags; every run is reproducible
bit-for-bit from (config, seed).  All outputs are plain CSV/JSON; on error
any partially written files are removed.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .bridge import (
    BridgeSpec,
    CrossingCriterion,
    default_general_criterion,
    sample_bridge_rows,
    write_bridge_outputs,
)
from .coupling import CouplingConfig
from .diagnostics import (
    copula_sup_distance,
    empirical_copula,
    gaussian_marginal_diagnostics,
)
from .inference import GibbsConfig, ObservationSet, gibbs_run, simulate_observations
from .mcmc import alt_mcmc_run, chain_marginal, pi_regression_experiment, pm_mh_run
from .models import (
    OUModel,
    make_hyperbolic_model,
    ou_bridge_marginal,
    ou_exact_bridge_batch,
)
from .reversal import reverse_model
from .sde import TimeGrid, replicate_rng, task_rng, write_path_csv

_ORACLE_KEY = 1 << 20
_CHAIN_KEY = 1 << 21


class _Outputs:
    """Tracks written files so a failed run leaves no partial outputs."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.written.append(p)
        return p

    def write_json(self, name: str, payload: dict) -> None:
        with open(self.path(name), "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")

    def write_csv(self, name: str, header: str, columns) -> None:
        np.savetxt(
            self.path(name),
            np.column_stack(columns),
            delimiter=",",
            header=header,
            comments="",
            fmt="%.17g",
        )

    def cleanup(self) -> None:
        for p in self.written:
            try:
                p.unlink(missing_ok=True)
            except OSError:
                pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _setting(args, config: dict, name: str, default=None):
    value = getattr(args, name.replace("-", "_"), None)
    if value is not None:
        return value
    return config.get(name, default)


def _build_models(config: dict, gamma_override=None):
    spec = config.get("model")
    if spec is None:
        raise ValueError("config must contain a 'model' entry")
    kind = spec.get("type")
    if kind == "ou":
        ou = OUModel(
            np.asarray(spec.get("mean", np.zeros(len(spec["drift_matrix"])))),
            np.asarray(spec["drift_matrix"]),
            np.asarray(spec.get("sigma", np.eye(len(spec["drift_matrix"])))),
        )
        model = ou.as_diffusion_model()
        return model, reverse_model(model), ou
    if kind == "hyperbolic":
        model = make_hyperbolic_model(float(spec["alpha"]), int(spec.get("dim", 2)))
        return model, model, None
    raise ValueError(f"unknown model type {kind!r}")


def _bridge_spec(args, config: dict) -> BridgeSpec:
    bridge = config.get("bridge", {})
    steps = int(_setting(args, config, "steps", bridge.get("steps", 50)))
    return BridgeSpec(
        np.asarray(bridge["start"], dtype=float),
        np.asarray(bridge["end"], dtype=float),
        float(bridge.get("horizon", 1.0)),
        steps,
    )


def _coupling(args, config: dict) -> CouplingConfig:
    section = config.get("coupling", {})
    gamma = _setting(args, config, "gamma", section.get("gamma", 0.5))
    return CouplingConfig(float(gamma), bool(section.get("orthogonal_correction", False)))


def _criterion(config: dict, step_size: float, gamma: float) -> CrossingCriterion:
    section = config.get("criterion")
    if section is None:
        if gamma == -1.0:
            return CrossingCriterion("reflection")
        return default_general_criterion(step_size)
    kind = section.get("kind", "general")
    if kind == "reflection":
        return CrossingCriterion("reflection")
    threshold = section.get("proximity_threshold")
    if threshold is None:
        return default_general_criterion(step_size)
    return CrossingCriterion("general", float(threshold))


def _threaded_bridges(model, reversed_model, grid, spec, cfg, criterion, n, seed, threads, max_attempts):
    """n replicate bridges; replicate i is a pure function of (seed, i)."""

    def run_range(lo: int, hi: int):
        rngs = [replicate_rng(seed, i) for i in range(lo, hi)]
        return sample_bridge_rows(
            model, reversed_model, grid, spec.start, spec.end, cfg, criterion, rngs, max_attempts
        )

    if threads <= 1:
        return run_range(0, n)
    bounds = np.linspace(0, n, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda b: run_range(*b), zip(bounds[:-1], bounds[1:])))
    out = []
    for part in parts:
        out.extend(part)
    return out


def _cmd_sample_bridge(args, config, out: _Outputs) -> None:
    model, reversed_model, _ = _build_models(config)
    spec = _bridge_spec(args, config)
    cfg = _coupling(args, config)
    criterion = _criterion(config, spec.grid.step_size, cfg.gamma)
    seed = int(_setting(args, config, "seed", 0))
    n = int(_setting(args, config, "replicates", 1))
    threads = int(_setting(args, config, "threads", 1))
    max_attempts = int(config.get("max_attempts", 10_000))
    bridges = _threaded_bridges(
        model, reversed_model, spec.grid, spec, cfg, criterion, n, seed, threads, max_attempts
    )
    for i, bridge in enumerate(bridges):
        write_bridge_outputs(
            bridge, cfg, criterion, seed, out.path(f"bridge_{i:06d}.csv"), out.path(f"bridge_{i:06d}.json")
        )


def _cmd_validate_ou(args, config, out: _Outputs) -> None:
    model, reversed_model, ou = _build_models(config)
    if ou is None:
        raise ValueError("validate-ou requires an 'ou' model")
    spec = _bridge_spec(args, config)
    cfg = _coupling(args, config)
    criterion = _criterion(config, spec.grid.step_size, cfg.gamma)
    seed = int(_setting(args, config, "seed", 0))
    n = int(_setting(args, config, "replicates", 20_000))
    threads = int(_setting(args, config, "threads", 1))
    oracle_factor = int(config.get("oracle_factor", 10))
    lattice = int(config.get("copula_lattice", 20))
    points = int(config.get("qq_points", 99))
    max_attempts = int(config.get("max_attempts", 10_000))

    bridges = _threaded_bridges(
        model, reversed_model, spec.grid, spec, cfg, criterion, n, seed, threads, max_attempts
    )
    mid = spec.steps // 2
    t_mid = spec.grid.times[mid]
    samples = chain_marginal(bridges, mid)
    mean, cov = ou_bridge_marginal(
        ou.drift_matrix, ou.v, spec.start, spec.end, t_mid, spec.horizon, mean=ou.mean
    )
    oracle = ou_exact_bridge_batch(
        ou.drift_matrix,
        ou.v,
        spec.start,
        spec.end,
        spec.grid,
        oracle_factor * n,
        task_rng(seed, _ORACLE_KEY),
        mean=ou.mean,
    )[:, mid]
    diag = gaussian_marginal_diagnostics(samples, mean, cov, oracle, points, lattice)
    for j, pairs in enumerate(diag.qq_pairs):
        out.write_csv(
            f"qq_x{j + 1}.csv",
            "p,empirical,exact",
            (diag.probabilities, pairs[:, 0], pairs[:, 1]),
        )
    uu, vv = np.meshgrid(
        (np.arange(1, lattice + 1)) / lattice,
        (np.arange(1, lattice + 1)) / lattice,
        indexing="ij",
    )
    out.write_csv(
        "copula.csv",
        "u,v,empirical,exact",
        (uu.ravel(), vv.ravel(), diag.copula_grid.ravel(), diag.copula_reference.ravel()),
    )
    out.write_json(
        "ks.json",
        {
            "ks": [float(k) for k in diag.ks],
            "copula_sup_distance": diag.copula_distance,
            "replicates": n,
            "gamma": cfg.gamma,
            "seed": seed,
            "time": float(t_mid),
            "mean_attempts": float(np.mean([b.attempts for b in bridges])),
        },
    )


def _write_chain_outputs(out, chain, rho_hats, spec, seed, stride, extra) -> None:
    mid = spec.steps // 2
    states = chain_marginal(chain, mid)
    idx = np.arange(1, len(chain) + 1)
    out.write_csv(
        "chain_marginal.csv",
        "iteration," + ",".join(f"x{j + 1}" for j in range(states.shape[1])),
        (idx, *[states[:, j] for j in range(states.shape[1])]),
    )
    entries = []
    if stride > 0:
        for m in range(0, len(chain), stride):
            name = f"bridge_iter{m:07d}.csv"
            with open(out.path(name), "w") as fh:
                write_path_csv(chain[m].path, fh)
            entries.append(
                {
                    "iteration": int(m),
                    "file": name,
                    "rho_hat": None if rho_hats is None else float(rho_hats[m]),
                }
            )
    manifest = {"seed": seed, "retained": len(chain), "entries": entries}
    manifest.update(extra)
    out.write_json("manifest.json", manifest)


def _cmd_pm_mh(args, config, out: _Outputs) -> None:
    model, reversed_model, _ = _build_models(config)
    spec = _bridge_spec(args, config)
    cfg = _coupling(args, config)
    criterion = _criterion(config, spec.grid.step_size, cfg.gamma)
    seed = int(_setting(args, config, "seed", 0))
    iterations = int(_setting(args, config, "iterations", 10_000))
    batch_size = int(_setting(args, config, "batch-size", 1))
    burn_in = int(_setting(args, config, "burn-in", 0))
    stride = int(_setting(args, config, "store-stride", 0))
    result = pm_mh_run(
        model,
        reversed_model,
        spec,
        cfg,
        criterion,
        iterations=iterations,
        batch_size=batch_size,
        burn_in=burn_in,
        rng=task_rng(seed, _CHAIN_KEY),
        max_attempts=int(config.get("max_attempts", 10_000)),
        max_trials=int(config.get("max_trials", 10_000)),
    )
    _write_chain_outputs(
        out,
        result.chain,
        result.rho_hats,
        spec,
        seed,
        stride,
        {
            "algorithm": "pm-mh",
            "iterations": iterations,
            "batch_size": batch_size,
            "accepted": result.accepted,
            "acceptance_rate": result.acceptance_rate,
        },
    )


def _cmd_alt_mcmc(args, config, out: _Outputs) -> None:
    model, reversed_model, _ = _build_models(config)
    spec = _bridge_spec(args, config)
    cfg = _coupling(args, config)
    criterion = _criterion(config, spec.grid.step_size, cfg.gamma)
    seed = int(_setting(args, config, "seed", 0))
    iterations = int(_setting(args, config, "iterations", 100_000))
    thin = int(_setting(args, config, "thin", 10))
    burn_in = int(_setting(args, config, "burn-in", 0))
    stride = int(_setting(args, config, "store-stride", 0))
    result = alt_mcmc_run(
        model,
        reversed_model,
        spec,
        cfg,
        criterion,
        iterations=iterations,
        thin=thin,
        burn_in=burn_in,
        rng=task_rng(seed, _CHAIN_KEY),
        max_attempts=int(config.get("max_attempts", 10_000)),
    )
    _write_chain_outputs(
        out,
        result.chain,
        None,
        spec,
        seed,
        stride,
        {
            "algorithm": "alt-mcmc",
            "iterations": iterations,
            "thin": thin,
            "replacements": result.replacements,
        },
    )


def _cmd_pi_regression(args, config, out: _Outputs) -> None:
    model, reversed_model, _ = _build_models(config)
    spec = _bridge_spec(args, config)
    cfg = _coupling(args, config)
    criterion = _criterion(config, spec.grid.step_size, cfg.gamma)
    seed = int(_setting(args, config, "seed", 0))
    iterations = int(_setting(args, config, "iterations", 3000))
    burn_in = int(_setting(args, config, "burn-in", 200))
    batch_sizes = config.get("batch_sizes", [50, 100, 150, 200, 300])
    result = pi_regression_experiment(
        model,
        reversed_model,
        spec,
        cfg,
        criterion,
        batch_sizes=[int(b) for b in batch_sizes],
        iterations=iterations,
        burn_in=burn_in,
        rng=task_rng(seed, _CHAIN_KEY),
    )
    out.write_csv(
        "variance_pairs.csv",
        "N,variance",
        (
            np.array([n for n, _ in result.pairs], dtype=float),
            np.array([v for _, v in result.pairs]),
        ),
    )
    out.write_json(
        "fit.json",
        {
            "intercept": result.fit.intercept,
            "slope": result.fit.slope,
            "intercept_se": result.fit.intercept_se,
            "slope_se": result.fit.slope_se,
            "implied_pi": result.implied_pi,
            "predicted_slope": result.predicted_slope,
            "seed": seed,
        },
    )


def _cmd_estimate_hyperbolic(args, config, out: _Outputs) -> None:
    data = ObservationSet.from_csv(args.data)
    seed = int(_setting(args, config, "seed", 0))
    gamma = float(_setting(args, config, "gamma", 0.5))
    cfg = GibbsConfig(
        prior_mean=float(_setting(args, config, "prior-mean", 1.0)),
        prior_variance=float(_setting(args, config, "prior-variance", 1.0)),
        iterations=int(_setting(args, config, "iterations", 5000)),
        burn_in=int(_setting(args, config, "burn-in", 0)),
        coupling=CouplingConfig(gamma),
        steps_per_unit=int(_setting(args, config, "steps", 50)),
        exact_imputation=bool(config.get("exact_imputation", False)),
    )
    result = gibbs_run(data, cfg, seed)
    out.write_csv(
        "chain.csv",
        "iteration,alpha",
        (np.arange(cfg.burn_in, cfg.iterations + 1, dtype=float), result.alphas),
    )
    lo, hi = result.credible_interval(0.95)
    out.write_json(
        "summary.json",
        {
            "posterior_mean": result.posterior_mean,
            "credible_interval_95": [lo, hi],
            "acceptance_diagnostics": {"mean_bridge_attempts": result.mean_bridge_attempts},
            "iterations": cfg.iterations,
            "burn_in": cfg.burn_in,
            "seed": seed,
        },
    )


def _cmd_simulate_data(args, config, out: _Outputs) -> None:
    model, _, _ = _build_models(config)
    seed = int(_setting(args, config, "seed", 0))
    n_obs = int(_setting(args, config, "n-obs", 1000))
    spacing = float(_setting(args, config, "spacing", 1.0))
    start = config.get("start", [0.0] * model.dim)
    times = spacing * np.arange(n_obs + 1)
    data = simulate_observations(
        model,
        np.asarray(start, dtype=float),
        times,
        task_rng(seed, _CHAIN_KEY),
        steps_per_unit=int(_setting(args, config, "steps", 50)),
    )
    with open(out.path("data.csv"), "w") as fh:
        data.to_csv(fh)


_COMMANDS = {
    "sample-bridge": _cmd_sample_bridge,
    "validate-ou": _cmd_validate_ou,
    "pm-mh": _cmd_pm_mh,
    "alt-mcmc": _cmd_alt_mcmc,
    "pi-regression": _cmd_pi_regression,
    "estimate-hyperbolic": _cmd_estimate_hyperbolic,
    "simulate-data": _cmd_simulate_data,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bridgesim")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--replicates", type=int)
        p.add_argument("--gamma", type=float)
        p.add_argument("--steps", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--burn-in", type=int, dest="burn_in")
        if name in ("pm-mh",):
            p.add_argument("--batch-size", type=int, dest="batch_size")
        if name in ("pm-mh", "alt-mcmc"):
            p.add_argument("--store-stride", type=int, dest="store_stride")
        if name == "alt-mcmc":
            p.add_argument("--thin", type=int)
        if name == "estimate-hyperbolic":
            p.add_argument("--data", required=True, help="observations CSV (t,x1,...,xd)")
            p.add_argument("--prior-mean", type=float, dest="prior_mean")
            p.add_argument("--prior-variance", type=float, dest="prior_variance")
        if name == "simulate-data":
            p.add_argument("--n-obs", type=int, dest="n_obs")
            p.add_argument("--spacing", type=float)
    return parser


def cli_main(argv) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = _load_config(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    out = _Outputs(Path(args.out))
    try:
        _COMMANDS[args.command](args, config, out)
    except (ValueError, KeyError) as exc:
        out.cleanup()
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        out.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
