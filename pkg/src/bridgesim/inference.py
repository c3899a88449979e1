"""Bayesian estimation for the hyperbolic diffusion from discrete observations.

When the full continuous path on [0, t_n] is available, the log likelihood
of the pull parameter is alpha * H - alpha^2 B / 2 with path functionals
free of stochastic integrals,

    H_t = sqrt(1+|X_0|^2) - sqrt(1+|X_t|^2)
          + int_0^t (1 + |X_s|^2 / 2) / (1 + |X_s|^2)^{3/2} ds,
    B_t = int_0^t |X_s|^2 / (1 + |X_s|^2) ds,

an exponential family in alpha, so a normal prior N(abar, s^2) is conjugate:
the posterior is normal with mean (H + abar/s^2) / (B + 1/s^2) and variance
1 / (B + 1/s^2).

Discrete observations leave the paths between them missing; the Gibbs
sampler alternates (i) imputing a bridge of the hyperbolic diffusion on
every inter-observation interval given the current alpha (the model is
time-reversible, so the reversed model is itself) and (ii) drawing alpha
from the conjugate posterior of the concatenated path.  Both functionals
telescope over intervals, so the concatenation is never materialised.
Integrals are trapezoidal on the imputation grid (error O(delta^2), in line
with the Euler path error).

alpha is positive but the conjugate posterior is a plain normal; a negative
draw (vanishingly rare at realistic data sizes) is rejected and redrawn.

Within one iteration the interval imputations are independent: interval k
of iteration i consumes only the generator keyed (seed, i, k), so the
result does not depend on the order (or batching) in which intervals are
processed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bridge import (
    BridgeSpec,
    CrossingCriterion,
    default_general_criterion,
    sample_bridge_rows,
)
from .coupling import CouplingConfig
from .mcmc import pm_mh_run
from .models import make_hyperbolic_model
from .sde import Array, DiffusionModel, SamplePath, TimeGrid, euler_states, task_rng

__all__ = [
    "ObservationSet",
    "SufficientStats",
    "GibbsConfig",
    "GibbsResult",
    "path_functionals",
    "posterior_params",
    "gibbs_run",
    "simulate_observations",
]


@dataclass(frozen=True)
class ObservationSet:
    """States observed at strictly increasing times."""

    times: Array
    values: Array

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape[0] != times.shape[0]:
            raise ValueError("times and values must have matching length")
        if times.size and np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.times.shape[0]

    def to_csv(self, file) -> None:
        header = "t," + ",".join(f"x{j + 1}" for j in range(self.dim))
        np.savetxt(
            file,
            np.column_stack([self.times, self.values]),
            delimiter=",",
            header=header,
            comments="",
            fmt="%.17g",
        )

    @classmethod
    def from_csv(cls, file) -> "ObservationSet":
        data = np.atleast_2d(np.loadtxt(file, delimiter=",", skiprows=1))
        return cls(data[:, 0], data[:, 1:])


@dataclass(frozen=True)
class SufficientStats:
    """The two path functionals entering the conjugate update."""

    h: float
    b_stat: float

    def __post_init__(self):
        if self.b_stat < -1e-12:
            raise ValueError("b_stat is an integral of a nonnegative function")


def _integrands(states: Array) -> tuple[Array, Array]:
    s = np.sum(states * states, axis=-1)
    one_plus = 1.0 + s
    return (1.0 + 0.5 * s) / one_plus**1.5, s / one_plus


def path_functionals(path: SamplePath) -> SufficientStats:
    """Trapezoidal H and B over one uniform-grid path (endpoint terms exact)."""
    states = path.states
    dt = path.grid.step_size
    f_h, f_b = _integrands(states)
    h = (
        np.sqrt(1.0 + np.sum(states[0] ** 2))
        - np.sqrt(1.0 + np.sum(states[-1] ** 2))
        + float(np.trapz(f_h, dx=dt))
    )
    return SufficientStats(h=float(h), b_stat=float(np.trapz(f_b, dx=dt)))


def posterior_params(
    stats: SufficientStats, prior_mean: float, prior_variance: float
) -> tuple[float, float]:
    """Posterior (mean, variance) of alpha under the conjugate normal prior."""
    if prior_variance <= 0:
        raise ValueError("prior_variance must be positive")
    precision = stats.b_stat + 1.0 / prior_variance
    mean = (stats.h + prior_mean / prior_variance) / precision
    return float(mean), float(1.0 / precision)


@dataclass(frozen=True)
class GibbsConfig:
    """Prior, chain length and bridge-imputation settings."""

    prior_mean: float = 1.0
    prior_variance: float = 1.0
    iterations: int = 5000
    burn_in: int = 0
    coupling: CouplingConfig = field(default_factory=lambda: CouplingConfig(0.5))
    criterion: Optional[CrossingCriterion] = None  # None: step-scaled general gate
    steps_per_unit: int = 50
    max_attempts: int = 10_000
    exact_imputation: bool = False  # impute via the pseudo-marginal chain instead
    exact_iterations: int = 5

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.steps_per_unit < 2:
            raise ValueError("steps_per_unit must be >= 2")


@dataclass
class GibbsResult:
    alphas: Array
    all_alphas: Array
    mean_bridge_attempts: float

    @property
    def posterior_mean(self) -> float:
        return float(self.alphas.mean())

    def credible_interval(self, level: float = 0.95) -> tuple[float, float]:
        tail = 0.5 * (1.0 - level)
        lo, hi = np.quantile(self.alphas, [tail, 1.0 - tail])
        return float(lo), float(hi)


def _positive_normal_draw(rng: np.random.Generator, mean: float, sd: float) -> float:
    # alpha > 0: redraw the (vanishingly rare) negative proposals
    for _ in range(1000):
        draw = rng.normal(mean, sd)
        if draw > 0:
            return float(draw)
    raise RuntimeError("posterior mass is essentially entirely below zero")


def gibbs_run(data: ObservationSet, cfg: GibbsConfig, seed: int) -> GibbsResult:
    """Gibbs chain for alpha; returns the post-burn-in draws.

    The chain starts from a prior draw, then alternates bridge imputation
    on all inter-observation intervals with the conjugate update.  Interval
    grids use ``round(steps_per_unit * dt)`` steps (at least 2).  Bridge
    exhaustion on an interval surfaces as an error naming the iteration.
    """
    if len(data) < 1:
        raise ValueError("data must contain at least one observation")
    dim = data.dim
    n_intervals = len(data) - 1
    spans = np.diff(data.times)
    steps = np.maximum(2, np.rint(cfg.steps_per_unit * spans).astype(int))
    # intervals sharing a grid size are imputed in one vectorised batch
    groups: dict[tuple[int, float], list[int]] = {}
    for k in range(n_intervals):
        groups.setdefault((int(steps[k]), float(spans[k])), []).append(k)

    alpha = _positive_normal_draw(
        task_rng(seed, 0), cfg.prior_mean, np.sqrt(cfg.prior_variance)
    )
    chain = [alpha]
    h_endpoints = float(
        np.sqrt(1.0 + np.sum(data.values[0] ** 2))
        - np.sqrt(1.0 + np.sum(data.values[-1] ** 2))
    )
    total_attempts = 0
    total_bridges = 0

    for it in range(1, cfg.iterations + 1):
        model = make_hyperbolic_model(alpha, dim)
        h_integral = 0.0
        b_integral = 0.0
        for (n_steps, span), members in groups.items():
            grid = TimeGrid(span, n_steps)
            dt = grid.step_size
            criterion = cfg.criterion or default_general_criterion(dt)
            starts = data.values[np.asarray(members)]
            ends = data.values[np.asarray(members) + 1]
            rngs = [task_rng(seed, it, k) for k in members]
            if cfg.exact_imputation:
                states = np.empty((len(members), n_steps + 1, dim))
                for row, k in enumerate(members):
                    spec = BridgeSpec(starts[row], ends[row], span, n_steps)
                    run = pm_mh_run(
                        model,
                        model,
                        spec,
                        cfg.coupling,
                        criterion,
                        iterations=cfg.exact_iterations,
                        rng=rngs[row],
                        max_attempts=cfg.max_attempts,
                    )
                    states[row] = run.chain[-1].path.states
                    total_attempts += run.chain[-1].attempts
                    total_bridges += 1
            else:
                try:
                    bridges = sample_bridge_rows(
                        model,
                        model,
                        grid,
                        starts,
                        ends,
                        cfg.coupling,
                        criterion,
                        rngs,
                        cfg.max_attempts,
                    )
                except Exception as exc:
                    raise RuntimeError(
                        f"bridge imputation failed at iteration {it}: {exc}"
                    ) from exc
                states = np.stack([b.path.states for b in bridges])
                total_attempts += sum(b.attempts for b in bridges)
                total_bridges += len(bridges)
            f_h, f_b = _integrands(states)
            h_integral += float(np.trapz(f_h, dx=dt, axis=1).sum())
            b_integral += float(np.trapz(f_b, dx=dt, axis=1).sum())
        stats = SufficientStats(h=h_endpoints + h_integral, b_stat=b_integral)
        mean, var = posterior_params(stats, cfg.prior_mean, cfg.prior_variance)
        alpha = _positive_normal_draw(task_rng(seed, it), mean, np.sqrt(var))
        chain.append(alpha)

    all_alphas = np.asarray(chain)
    return GibbsResult(
        alphas=all_alphas[cfg.burn_in :],
        all_alphas=all_alphas,
        mean_bridge_attempts=(total_attempts / total_bridges) if total_bridges else 0.0,
    )


def simulate_observations(
    model: DiffusionModel,
    x0: Array,
    times: Array,
    rng: np.random.Generator,
    steps_per_unit: int = 50,
) -> ObservationSet:
    """Forward-simulate and record the states at the requested times.

    Each inter-observation span is covered by a fine Euler grid of
    ``round(steps_per_unit * span)`` steps (at least 2).
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    x = np.asarray(x0, dtype=float)
    values = [x]
    for span in np.diff(times):
        n = max(2, int(np.rint(steps_per_unit * span)))
        dt = span / n
        inc = rng.standard_normal((n, model.dim)) * np.sqrt(dt)
        states = euler_states(model, x, inc, dt)
        if not np.all(np.isfinite(states)):
            raise RuntimeError("forward simulation blew up")
        x = states[-1]
        values.append(x)
    return ObservationSet(times, np.stack(values))
