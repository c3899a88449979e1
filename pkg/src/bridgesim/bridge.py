"""Approximate pinned-path ("bridge") sampling by coupling.

To produce a path of the diffusion from ``a`` at time 0 to ``b`` at time T:

1. simulate the time-reversed model from ``b`` over [0, T] (states Y*),
   so that read backwards it behaves like the forward diffusion
   conditioned to end at ``b``;
2. recover the increments that drive the backward reading of Y* under the
   *forward* drift,

       dW_rev_i = sigma(Y*_{(N-i+1)d})^{-1}
                  (Y*_{(N-i)d} - Y*_{(N-i+1)d} - alpha(Y*_{(N-i+1)d}) delta);

3. simulate the follower Y' from ``a`` driven by the gamma-coupled
   increments built from dW_rev and fresh scalar noise, pairing the
   reversed-time state with the current follower state;
4. detect the first grid interval in which the two processes crossed and
   splice:  Z_i = Y'_i for i < rho, Z_i = Y*_{(N-i)d} for i >= rho.

Repeat until a crossing happens (rejection sampling); the acceptance
probability is the coupling probability before T, so the construction gets
*better* as T grows and costs O(N) per attempt.

Crossing cannot be observed between grid points, so two grid-level criteria
are provided: a general bilinear sign-flip test, optionally gated by a
proximity threshold on |lead - follower| (default 0.05, scaled with
sqrt(delta / 0.02) when the step changes), and a sharper mid-plane test
valid for the pure reflection coupling (gamma = -1).  The step size
controls the chance of missing a crossing, so it pays to choose delta
smaller than for plain simulation of the same model.

The approximation is exact only conditionally on a hit event; the
``mcmc`` module upgrades these draws to exact pinned paths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm as _stdnorm

from . import _engine
from .coupling import CouplingConfig
from .sde import (
    Array,
    DiffusionModel,
    SamplePath,
    TimeGrid,
    WienerIncrements,
    implied_increments,
    euler_states,
    replicate_rng,
)

__all__ = [
    "BridgeSpec",
    "CrossingCriterion",
    "ApproximateBridge",
    "BridgeExhaustedError",
    "default_general_criterion",
    "reversed_increments",
    "simulate_coupled_forward",
    "detect_crossing_general",
    "detect_crossing_reflection",
    "coupling_probability_lower_bound",
    "sample_approximate_bridge",
    "sample_bridge_batch",
    "write_bridge_outputs",
]


class BridgeExhaustedError(RuntimeError):
    """No crossing was detected within the attempt budget.

    The coupling probability before T is too small for the configured
    budget; enlarge the horizon, move gamma, or raise the cap.
    """

    def __init__(self, attempts: int, message: str | None = None):
        self.attempts = attempts
        super().__init__(message or f"no crossing within {attempts} attempts")


@dataclass(frozen=True)
class BridgeSpec:
    """Endpoints, horizon and grid resolution of the pinned path."""

    start: Array
    end: Array
    horizon: float
    steps: int

    def __post_init__(self):
        start = np.atleast_1d(np.asarray(self.start, dtype=float))
        end = np.atleast_1d(np.asarray(self.end, dtype=float))
        if start.shape != end.shape:
            raise ValueError("start and end must have the same dimension")
        if self.steps < 2:
            raise ValueError("need at least 2 grid steps")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "end", end)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.steps)


@dataclass(frozen=True)
class CrossingCriterion:
    """Grid-level rule deciding that two paths met inside an interval.

    kind "general": sign flip of (lead-follower)^T V^{-1} (lead'-follower')
    across the interval, gated by |lead - follower| <= proximity_threshold
    at the interval start (threshold 0 disables the gate).  kind
    "reflection": the lead's next point crossed the mid-plane between the
    pair; valid only for gamma = -1 and used without a gate.
    """

    kind: str = "general"
    proximity_threshold: float = 0.0

    def __post_init__(self):
        if self.kind not in ("general", "reflection"):
            raise ValueError("kind must be 'general' or 'reflection'")
        if self.proximity_threshold < 0:
            raise ValueError("proximity_threshold must be >= 0")
        if self.kind == "reflection" and self.proximity_threshold != 0.0:
            raise ValueError("the reflection criterion takes no proximity gate")


def default_general_criterion(step_size: float) -> CrossingCriterion:
    """General criterion with the step-scaled proximity gate.

    The base gate is 0.05 at delta = 0.02 and scales with sqrt(delta); a
    heuristic, override by constructing :class:`CrossingCriterion` directly.
    """
    return CrossingCriterion("general", 0.05 * np.sqrt(step_size / 0.02))


@dataclass(frozen=True)
class ApproximateBridge:
    """A spliced pinned path.

    ``coupling_index`` is rho in 1..N: states 0..rho-1 come from the
    follower, states rho..N from the backward reading of the reversed
    simulation.  ``driving_increments`` hold the increments that drive the
    splice under the forward model (follower increments before the splice,
    reversed-implied increments from rho on).  ``splice_anchor`` is the
    reversed-path state at index rho-1: Euler from it with increments
    rho..N reproduces the suffix exactly, while Euler from the start state
    with increments 1..rho-1 reproduces the prefix exactly.  ``attempts``
    counts proposal attempts consumed, including the accepted one.
    """

    path: SamplePath
    coupling_index: int
    driving_increments: WienerIncrements
    attempts: int
    splice_anchor: Optional[Array] = None

    @property
    def start(self) -> Array:
        return self.path.states[0]

    @property
    def end(self) -> Array:
        return self.path.states[-1]


def reversed_increments(y_star: SamplePath, model: DiffusionModel) -> WienerIncrements:
    """Increments driving the backward reading of ``y_star`` under the forward drift.

    Increment i moves the reversed-time path from index i-1 to i, so an
    Euler re-simulation of the reversed states with these increments
    reproduces them exactly.
    """
    rev = y_star.states[::-1]
    return WienerIncrements(implied_increments(model, rev, y_star.grid.step_size))


def simulate_coupled_forward(
    y_star: SamplePath,
    start: Array,
    model: DiffusionModel,
    cfg: CouplingConfig,
    rng: np.random.Generator,
) -> tuple[SamplePath, WienerIncrements]:
    """Follower path from ``start`` coupled to the backward reading of ``y_star``.

    Step i pairs the reversed-time state at index i-1 with the current
    follower state.  If the pair ever coincides (numerically), the follower
    copies the reversed path from then on.  Draws N scalar normals.
    """
    grid = y_star.grid
    dt = grid.step_size
    rev = y_star.states[::-1]
    dwrev = implied_increments(model, rev, dt)
    db = rng.standard_normal(grid.steps) * np.sqrt(dt)
    follower, increments, _ = _engine.coupled_forward_batch(
        model, cfg, rev[None], dwrev[None], np.asarray(start, float), db[None], dt
    )
    return SamplePath(grid, follower[0]), WienerIncrements(increments[0])


def detect_crossing_general(
    xi: Array,
    xpi: Array,
    xnext: Array,
    xpnext: Array,
    v: Array,
    proximity_threshold: float = 0.0,
) -> bool:
    """Sign-flip test on one interval, with optional proximity gate."""
    xi = np.asarray(xi, float)
    xpi = np.asarray(xpi, float)
    diff = xi - xpi
    form = float(diff @ np.linalg.solve(np.asarray(v, float), np.asarray(xnext, float) - np.asarray(xpnext, float)))
    if form >= 0.0:
        return False
    return proximity_threshold == 0.0 or float(np.linalg.norm(diff)) <= proximity_threshold


def detect_crossing_reflection(
    xi: Array,
    xpi: Array,
    xnext: Array,
    drift_at_xi: Array,
    v: Array,
    dt: float,
) -> bool:
    """Mid-plane test for the reflection coupling on one interval.

    True iff the lead's next point lies on the far side of (or on) the
    plane through (xi + xpi)/2 orthogonal, in V^{-1} geometry, to xi - xpi.
    """
    diff = np.asarray(xi, float) - np.asarray(xpi, float)
    w = np.linalg.solve(np.asarray(v, float), diff)
    lhs = float(np.asarray(xnext, float) @ w)
    rhs = float((dt * np.asarray(drift_at_xi, float) + 0.5 * (np.asarray(xi, float) + np.asarray(xpi, float))) @ w)
    return lhs <= rhs


def coupling_probability_lower_bound(xi: Array, xpi: Array, v: Array, dt: float) -> float:
    """Phi(-omega / (2 sqrt(dt))) with omega^2 = (xi-xpi)^T V^{-1} (xi-xpi).

    A lower bound on the conditional probability that a reflection-coupled
    pair meets within the next interval.
    """
    diff = np.asarray(xi, float) - np.asarray(xpi, float)
    omega = float(np.sqrt(diff @ np.linalg.solve(np.asarray(v, float), diff)))
    return float(_stdnorm.cdf(-0.5 * omega / np.sqrt(dt)))


def _as_row_endpoints(value: Array, rows: int, dim: int) -> Array:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        arr = np.broadcast_to(arr, (rows, dim))
    return arr


def sample_bridge_rows(
    model: DiffusionModel,
    reversed_model: DiffusionModel,
    grid: TimeGrid,
    starts: Array,
    ends: Array,
    cfg: CouplingConfig,
    criterion: CrossingCriterion,
    rngs: Sequence[np.random.Generator],
    max_attempts: int = 10_000,
) -> list[ApproximateBridge]:
    """Rejection-sample one accepted bridge per row; rows run vectorised.

    Endpoints may differ per row.  Row j consumes randomness only from
    ``rngs[j]`` (per attempt: an (N, d) block for the reversed path, then an
    (N,) block for the scalar channel), so results are independent of how
    rows are batched together.  A row whose attempt blows up to non-finite
    values just counts a rejection.  Any row exceeding ``max_attempts``
    raises :class:`BridgeExhaustedError`.
    """
    if criterion.kind == "reflection" and cfg.gamma != -1.0:
        raise ValueError("the reflection criterion is only valid for gamma = -1")
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    n_rows = len(rngs)
    dim = model.dim
    dt = grid.step_size
    sqdt = np.sqrt(dt)
    n = grid.steps
    starts = _as_row_endpoints(starts, n_rows, dim)
    ends = _as_row_endpoints(ends, n_rows, dim)

    results: list[Optional[ApproximateBridge]] = [None] * n_rows
    attempts = np.zeros(n_rows, dtype=np.int64)
    pending = np.arange(n_rows)

    while pending.size:
        dw = np.stack([rngs[j].standard_normal((n, dim)) for j in pending]) * sqdt
        db = np.stack([rngs[j].standard_normal(n) for j in pending]) * sqdt
        y_star = euler_states(reversed_model, ends[pending], dw, dt)
        rev = y_star[:, ::-1]
        with np.errstate(all="ignore"):
            dwrev = implied_increments(model, rev, dt)
        follower, fol_inc, coincide = _engine.coupled_forward_batch(
            model, cfg, rev, dwrev, starts[pending], db, dt
        )
        ok = _engine.finite_rows(y_star, dwrev, follower, fol_inc)
        rho = _engine.first_crossing_batch(
            model, criterion.kind, criterion.proximity_threshold, rev, follower, dt, coincide
        )
        rho[~ok] = 0
        attempts[pending] += 1

        for j in np.nonzero(rho > 0)[0]:
            gi = int(pending[j])
            r = int(rho[j])
            states = np.concatenate([follower[j, :r], rev[j, r:]], axis=0)
            incs = np.concatenate([fol_inc[j, : r - 1], dwrev[j, r - 1 :]], axis=0)
            results[gi] = ApproximateBridge(
                path=SamplePath(grid, states),
                coupling_index=r,
                driving_increments=WienerIncrements(incs),
                attempts=int(attempts[gi]),
                splice_anchor=rev[j, r - 1].copy(),
            )
        pending = pending[rho == 0]
        if pending.size and int(attempts[pending].max()) >= max_attempts:
            raise BridgeExhaustedError(
                max_attempts,
                f"{int((attempts[pending] >= max_attempts).sum())} replicate(s) "
                f"found no crossing within {max_attempts} attempts",
            )
    return results  # type: ignore[return-value]


def sample_approximate_bridge(
    model: DiffusionModel,
    reversed_model: DiffusionModel,
    spec: BridgeSpec,
    cfg: CouplingConfig,
    criterion: CrossingCriterion | None = None,
    max_attempts: int = 10_000,
    rng: np.random.Generator | None = None,
) -> ApproximateBridge:
    """One accepted bridge for ``spec`` (see :func:`sample_bridge_rows`)."""
    if rng is None:
        rng = np.random.default_rng()
    grid = spec.grid
    if criterion is None:
        criterion = default_general_criterion(grid.step_size)
    return sample_bridge_rows(
        model, reversed_model, grid, spec.start, spec.end, cfg, criterion, [rng], max_attempts
    )[0]


def sample_bridge_batch(
    model: DiffusionModel,
    reversed_model: DiffusionModel,
    spec: BridgeSpec,
    cfg: CouplingConfig,
    criterion: CrossingCriterion | None = None,
    *,
    n: int,
    base_seed: int | None = None,
    rngs: Sequence[np.random.Generator] | None = None,
    max_attempts: int = 10_000,
) -> list[ApproximateBridge]:
    """n independent accepted bridges, replicate i seeded by (base_seed, i)."""
    grid = spec.grid
    if criterion is None:
        criterion = default_general_criterion(grid.step_size)
    if rngs is None:
        if base_seed is None:
            raise ValueError("provide base_seed or rngs")
        rngs = [replicate_rng(base_seed, i) for i in range(n)]
    elif len(rngs) != n:
        raise ValueError("need one generator per replicate")
    return sample_bridge_rows(
        model, reversed_model, grid, spec.start, spec.end, cfg, criterion, rngs, max_attempts
    )


def write_bridge_outputs(
    bridge: ApproximateBridge,
    cfg: CouplingConfig,
    criterion: CrossingCriterion,
    seed,
    csv_path,
    json_path,
) -> None:
    """Bridge CSV plus the JSON sidecar {rho, attempts, gamma, criterion, seed}."""
    from .sde import write_path_csv

    with open(csv_path, "w") as fh:
        write_path_csv(bridge.path, fh)
    sidecar = {
        "rho": int(bridge.coupling_index),
        "attempts": int(bridge.attempts),
        "gamma": cfg.gamma,
        "criterion": {
            "kind": criterion.kind,
            "proximity_threshold": criterion.proximity_threshold,
        },
        "seed": seed,
    }
    with open(json_path, "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
