"""Exact bridge sampling: hit-count estimators and the two correcting chains.

A sampled approximate bridge ``Z`` carries the increments that drive it, so
the coupling construction can be run *backwards*: starting from an
independent draw ``A`` of the reversed diffusion's time-T law (obtained by
simulating the reversed model from ``b`` and keeping the endpoint) and fresh
scalar noise, the inverse coupling map reconstructs a candidate for the
process that produced ``Z``.  Whether that reconstruction intersects ``Z``
is exactly the event whose probability ``pi_T(Z)`` ties the law of the
approximate bridge ``f_a`` to the exact bridge law ``f_br``:

    f_a(z) = f_br(z) * pi_T(z) / pi_T.

The number of independent reconstructions needed until the first hit is
geometric, so its mean ``rho_hat`` (over a batch of hit counts) estimates
``1 / pi_T(z)`` without bias.  Two chains with stationary law f_br follow:

* a pseudo-marginal Metropolis-Hastings sampler: propose an independent
  approximate bridge, accept with min(1, rho_hat_new / rho_hat_old),
  retaining both the bridge and its estimate on rejection;
* a simpler alternative chain: reconstruct once against the current
  bridge; replace it by a fresh approximate bridge exactly when the
  reconstruction hits.  It satisfies detailed balance but repeats a lot,
  so thinned output is recommended.

Neither pi_T, f_a nor f_br is ever evaluated; they enter only through hit
events.  Hit detection reuses the grid crossing criteria of the bridge
sampler (the reconstruction relates to Z exactly as the coupled follower
relates to its lead), with V and the drift taken at the bridge's state.

The variance of rho_hat over a chain decomposes as

    V(rho_hat_N) = V(1/pi_T) + E[(1 - pi_T)/pi_T^2] / N,

so regressing empirical variances on 1/N estimates V(1/pi_T): a vanishing
intercept certifies that pi_T is (nearly) constant, in which case the
approximate sampler is already (nearly) exact and 1/mean(rho_hat)
estimates the constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _engine
from .bridge import (
    ApproximateBridge,
    BridgeExhaustedError,
    BridgeSpec,
    CrossingCriterion,
    default_general_criterion,
    sample_bridge_rows,
)
from .coupling import CouplingConfig
from .sde import Array, DiffusionModel, SamplePath, TimeGrid, euler_states

__all__ = [
    "AssociatedDiffusionRun",
    "HitCount",
    "RhoEstimate",
    "ChainState",
    "PMMHResult",
    "AltMCMCResult",
    "RegressionFit",
    "PiRegressionResult",
    "HitCountExhaustedError",
    "reconstruct_lead_path",
    "simulate_associated_diffusion",
    "sample_hit_count",
    "sample_hit_counts",
    "pm_mh_run",
    "alt_mcmc_run",
    "pi_variance_regression",
    "pi_regression_experiment",
    "chain_marginal",
]

HitTrialsFn = Callable[[object, int, np.random.Generator], Array]


class HitCountExhaustedError(RuntimeError):
    """No reconstruction hit within the trial budget (pi_T too small for it)."""

    def __init__(self, trials: int, message: str | None = None):
        self.trials = trials
        super().__init__(message or f"no hit within {trials} reconstruction trials")


@dataclass(frozen=True)
class AssociatedDiffusionRun:
    """One inverse-coupling reconstruction against a candidate bridge."""

    path: SamplePath
    initial_draw: Array
    hit: bool
    hit_interval: Optional[int] = None


@dataclass(frozen=True)
class HitCount:
    """Index of the first hitting reconstruction; geometric with mean 1/pi_T."""

    value: int
    trials: int

    def __post_init__(self):
        if self.value < 1 or self.value != self.trials:
            raise ValueError("a hit count is the (>=1) index of the first hit")


@dataclass(frozen=True)
class RhoEstimate:
    """Batch of hit counts and their mean, the unbiased estimate of 1/pi_T."""

    counts: Array

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size < 1 or counts.min() < 1:
            raise ValueError("counts must be a nonempty vector of integers >= 1")
        object.__setattr__(self, "counts", counts)

    @property
    def estimate(self) -> float:
        return float(self.counts.mean())


@dataclass
class ChainState:
    """Mutable cursor of a running chain."""

    current_bridge: object
    current_rho: Optional[float]
    iteration: int
    accepted: int


def _real_hit_trials(
    model: DiffusionModel,
    reversed_model: DiffusionModel,
    cfg: CouplingConfig,
    criterion: CrossingCriterion,
    grid: TimeGrid,
) -> HitTrialsFn:
    """Batch of k independent hit trials against one bridge.

    Each trial draws a fresh start A (endpoint of a reversed-model path
    from the bridge's end, an (N, d) normal block) and fresh scalar noise
    (an (N,) block), reconstructs, and tests for a crossing against the
    bridge.  Trials that blow up to non-finite values count as misses.
    """
    dt = grid.step_size
    n = grid.steps
    d = model.dim
    sqdt = np.sqrt(dt)

    def trials(bridge: ApproximateBridge, k: int, rng: np.random.Generator) -> Array:
        dw = rng.standard_normal((k, n, d)) * sqdt
        a_paths = euler_states(reversed_model, bridge.path.states[-1], dw, dt)
        start = a_paths[:, n]
        du = rng.standard_normal((k, n)) * sqdt
        recon, coincide = _engine.inverse_coupled_batch(
            model,
            cfg,
            bridge.path.states,
            bridge.driving_increments.increments,
            start,
            du,
            dt,
        )
        ok = _engine.finite_rows(a_paths, recon)
        rho = _engine.first_crossing_batch(
            model,
            criterion.kind,
            criterion.proximity_threshold,
            np.broadcast_to(bridge.path.states, recon.shape),
            recon,
            dt,
            coincide,
        )
        return (rho > 0) & ok

    return trials


def reconstruct_lead_path(
    model: DiffusionModel,
    cfg: CouplingConfig,
    follower_path: SamplePath,
    follower_increments: Array,
    start: Array,
    du: Array,
) -> tuple[SamplePath, Optional[int]]:
    """Inverse coupling map with explicit noise (no generator).

    Drives the reconstruction from ``start`` against ``follower_path`` using
    its driving increments and the given scalar increments ``du`` (length
    N, already scaled by sqrt(delta)).  Returns the path and the first
    state index at which it coincided with the follower, if any.
    """
    dt = follower_path.grid.step_size
    states, coincide = _engine.inverse_coupled_batch(
        model,
        cfg,
        follower_path.states,
        np.asarray(follower_increments, dtype=float),
        np.asarray(start, dtype=float),
        np.asarray(du, dtype=float)[None],
        dt,
    )
    idx = int(coincide[0]) if coincide[0] != _engine.NO_COINCIDENCE else None
    return SamplePath(follower_path.grid, states[0]), idx


def simulate_associated_diffusion(
    z: ApproximateBridge,
    model: DiffusionModel,
    reversed_model: DiffusionModel,
    cfg: CouplingConfig,
    criterion: CrossingCriterion,
    rng: np.random.Generator,
) -> AssociatedDiffusionRun:
    """One reconstruction run against ``z``, with its hit verdict.

    The start is drawn by simulating the reversed model from the bridge's
    end over the full horizon, independently of ``z``; the recursion then
    consumes the bridge's stored driving increments plus fresh scalar
    noise.
    """
    grid = z.path.grid
    dt = grid.step_size
    n = grid.steps
    dw = rng.standard_normal((n, model.dim)) * np.sqrt(dt)
    a_path = euler_states(reversed_model, z.path.states[-1], dw, dt)
    start = a_path[n]
    du = rng.standard_normal(n) * np.sqrt(dt)
    recon, coincide = _engine.inverse_coupled_batch(
        model, cfg, z.path.states, z.driving_increments.increments, start, du[None], dt
    )
    rho = _engine.first_crossing_batch(
        model,
        criterion.kind,
        criterion.proximity_threshold,
        z.path.states,
        recon[0],
        dt,
        coincide,
    )
    hit = int(rho[0]) > 0 and bool(np.isfinite(recon).all())
    return AssociatedDiffusionRun(
        path=SamplePath(grid, recon[0]),
        initial_draw=start,
        hit=hit,
        hit_interval=int(rho[0]) if hit else None,
    )


def sample_hit_count(
    z: ApproximateBridge,
    model: DiffusionModel | None = None,
    reversed_model: DiffusionModel | None = None,
    cfg: CouplingConfig | None = None,
    criterion: CrossingCriterion | None = None,
    max_trials: int = 10_000,
    rng: np.random.Generator | None = None,
    hit_trials: HitTrialsFn | None = None,
) -> HitCount:
    """First-hit index over independent reconstruction trials.

    Trials are simulated in growing chunks for speed; the returned value is
    the index of the first hit among i.i.d. trials, so its law is exactly
    geometric with success probability pi_T(z).
    """
    if hit_trials is None:
        hit_trials = _real_hit_trials(model, reversed_model, cfg, criterion, z.path.grid)
    if rng is None:
        rng = np.random.default_rng()
    done = 0
    chunk = 8
    while done < max_trials:
        k = min(chunk, max_trials - done)
        hits = np.asarray(hit_trials(z, k, rng), dtype=bool)
        pos = np.nonzero(hits)[0]
        if pos.size:
            value = done + int(pos[0]) + 1
            return HitCount(value, value)
        done += k
        chunk = min(chunk * 2, 2048)
    raise HitCountExhaustedError(max_trials)


def sample_hit_counts(
    z: ApproximateBridge,
    n_counts: int,
    model: DiffusionModel | None = None,
    reversed_model: DiffusionModel | None = None,
    cfg: CouplingConfig | None = None,
    criterion: CrossingCriterion | None = None,
    max_trials: int = 10_000,
    rng: np.random.Generator | None = None,
    hit_trials: HitTrialsFn | None = None,
    initial_chunk: int | None = None,
) -> RhoEstimate:
    """A batch of ``n_counts`` independent hit counts against one bridge.

    Because trials are i.i.d. given the bridge, the batch equals the gaps
    between consecutive hits of one trial stream; the stream is simulated
    in chunks sized from the running hit-rate estimate (seed the estimate
    via ``initial_chunk`` when a good guess is available).
    """
    if hit_trials is None:
        hit_trials = _real_hit_trials(model, reversed_model, cfg, criterion, z.path.grid)
    if rng is None:
        rng = np.random.default_rng()
    values: list[int] = []
    gap = 0
    chunk = int(np.clip(initial_chunk or 4 * n_counts, 4, 16384))
    while len(values) < n_counts:
        hits = np.asarray(hit_trials(z, chunk, rng), dtype=bool)
        pos = np.nonzero(hits)[0]
        if pos.size == 0:
            gap += chunk
            if gap >= max_trials:
                raise HitCountExhaustedError(max_trials)
        else:
            values.append(gap + int(pos[0]) + 1)
            values.extend(int(g) for g in np.diff(pos))
            gap = chunk - int(pos[-1]) - 1
            mean_t = max(1.0, float(np.mean(values)))
            need = max(0, n_counts - len(values))
            chunk = int(np.clip(np.ceil(1.3 * (need + 1) * mean_t), 32, 16384))
        if values and max(values) > max_trials:
            raise HitCountExhaustedError(max_trials)
    return RhoEstimate(np.asarray(values[:n_counts], dtype=np.int64))


def _first_hit_counts_arrays(
    z: Array,
    dwt: Array,
    owner: Array,
    model: DiffusionModel,
    reversed_model: DiffusionModel,
    cfg: CouplingConfig,
    criterion: CrossingCriterion,
    dt: float,
    cap: int,
    rng: np.random.Generator,
    on_cap: str = "error",
    speculative_budget: int = 8192,
) -> Array:
    """First-hit trial index per slot; slot ``s`` tests against bridge ``owner[s]``.

    ``z`` (P, N+1, d) and ``dwt`` (P, N, d) hold the bridge states and
    driving increments; several slots may share an owner (independent hit
    counts against the same bridge).  Each round runs a block of
    independent reconstruction trials for every slot still waiting; once
    few slots remain, several speculative trials per slot run in the same
    block.  The count laws are exactly the per-slot geometrics.  Slots
    reaching ``cap`` trials without a hit raise
    :class:`HitCountExhaustedError` when ``on_cap="error"`` or are
    returned clipped at ``cap`` when ``on_cap="clip"``.
    """
    n_slots = owner.shape[0]
    n = dwt.shape[1]
    d = z.shape[2]
    sqdt = np.sqrt(dt)
    ends = z[:, -1]
    counts = np.zeros(n_slots, dtype=np.int64)
    pending = np.arange(n_slots)
    while pending.size:
        per_row = int(np.clip(speculative_budget // pending.size, 1, 64))
        per_row = max(min(per_row, int(cap - counts[pending].min())), 1)
        rows = np.repeat(owner[pending], per_row)
        k = rows.size
        dw = rng.standard_normal((k, n, d)) * sqdt
        a_paths = euler_states(reversed_model, ends[rows], dw, dt)
        du = rng.standard_normal((k, n)) * sqdt
        recon, coincide = _engine.inverse_coupled_batch(
            model, cfg, z[rows], dwt[rows], a_paths[:, n], du, dt
        )
        ok = _engine.finite_rows(a_paths, recon)
        rho = _engine.first_crossing_batch(
            model,
            criterion.kind,
            criterion.proximity_threshold,
            z[rows],
            recon,
            dt,
            coincide,
        )
        hit = ((rho > 0) & ok).reshape(pending.size, per_row)
        got = hit.any(axis=1)
        counts[pending] += np.where(got, hit.argmax(axis=1) + 1, per_row)
        pending = pending[~got]
        if pending.size:
            exhausted = counts[pending] >= cap
            if exhausted.any():
                if on_cap == "error":
                    raise HitCountExhaustedError(int(cap))
                pending = pending[~exhausted]
    return counts


def first_hit_counts(
    bridges: Sequence[ApproximateBridge],
    model: DiffusionModel,
    reversed_model: DiffusionModel,
    cfg: CouplingConfig,
    criterion: CrossingCriterion,
    cap: int,
    rng: np.random.Generator,
    on_cap: str = "error",
    counts_per_bridge: int = 1,
    slot_block: int = 65536,
) -> Array:
    """First-hit trial counts, vectorised across bridges.

    Returns a (len(bridges), counts_per_bridge) array of independent hit
    counts (squeezed to 1-d when ``counts_per_bridge`` is 1).  Slots are
    processed in blocks of at most ``slot_block`` to bound memory.
    """
    z = np.stack([b.path.states for b in bridges])
    dwt = np.stack([b.driving_increments.increments for b in bridges])
    dt = bridges[0].path.grid.step_size
    owner = np.repeat(np.arange(len(bridges)), counts_per_bridge)
    counts = np.empty(owner.shape[0], dtype=np.int64)
    budget = int(min(max(4096, owner.shape[0]), 65536))
    for lo in range(0, owner.shape[0], slot_block):
        hi = min(lo + slot_block, owner.shape[0])
        counts[lo:hi] = _first_hit_counts_arrays(
            z, dwt, owner[lo:hi], model, reversed_model, cfg, criterion, dt,
            cap, rng, on_cap, budget,
        )
    if counts_per_bridge == 1:
        return counts
    return counts.reshape(len(bridges), counts_per_bridge)


@dataclass
class PMMHResult:
    """Pseudo-marginal chain output (post burn-in, repeats included)."""

    chain: list
    rho_hats: Array
    accepted: int
    iterations: int
    proposal_rho_hats: Array

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.iterations


@dataclass
class AltMCMCResult:
    """Thinned output of the alternative chain."""

    chain: list
    replacements: int
    iterations: int
    thin: int


def _default_proposals(
    model, reversed_model, grid, spec, cfg, criterion, rngs, max_attempts
) -> list[ApproximateBridge]:
    return sample_bridge_rows(
        model, reversed_model, grid, spec.start, spec.end, cfg, criterion, rngs, max_attempts
    )


def pm_mh_run(
    model: DiffusionModel,
    reversed_model: DiffusionModel,
    spec: BridgeSpec,
    cfg: CouplingConfig,
    criterion: CrossingCriterion | None = None,
    *,
    iterations: int,
    batch_size: int = 1,
    rng: np.random.Generator,
    burn_in: int = 0,
    max_attempts: int = 10_000,
    max_trials: int = 10_000,
    proposal_sampler: Callable[[np.random.Generator], object] | None = None,
    hit_trials: HitTrialsFn | None = None,
) -> PMMHResult:
    """Pseudo-marginal Metropolis-Hastings chain targeting the exact bridge law.

    Proposals are independent approximate bridges; each carries a
    ``rho_hat`` built from ``batch_size`` hit counts.  A proposal is
    accepted with probability min(1, rho_hat_new / rho_hat_current); on
    rejection the previous bridge *and* its estimate are kept unchanged.
    Because proposals do not depend on the chain state, they are generated
    up front in one vectorised batch.

    ``proposal_sampler`` and ``hit_trials`` exist to substitute stubs for
    the two stochastic components (used by the oracle tests); the chain
    mechanics are identical either way.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    grid = spec.grid
    if criterion is None:
        criterion = default_general_criterion(grid.step_size)
    prop_rngs = rng.spawn(iterations + 1)
    try:
        if proposal_sampler is None:
            proposals = _default_proposals(
                model, reversed_model, grid, spec, cfg, criterion, prop_rngs, max_attempts
            )
        else:
            proposals = [proposal_sampler(r) for r in prop_rngs]
    except BridgeExhaustedError as exc:
        raise BridgeExhaustedError(exc.attempts, f"proposal generation failed: {exc}") from exc

    hc_rng = rng.spawn(1)[0]
    rho = np.empty(iterations + 1)
    if hit_trials is None and proposal_sampler is None:
        counts = first_hit_counts(
            proposals,
            model,
            reversed_model,
            cfg,
            criterion,
            max_trials,
            hc_rng,
            counts_per_bridge=batch_size,
        )
        rho[:] = counts if batch_size == 1 else counts.mean(axis=1)
    else:
        mean_t = 4.0
        for i, bridge_i in enumerate(proposals):
            try:
                est = sample_hit_counts(
                    bridge_i,
                    batch_size,
                    model,
                    reversed_model,
                    cfg,
                    criterion,
                    max_trials=max_trials,
                    rng=hc_rng,
                    hit_trials=hit_trials,
                    initial_chunk=int(1.3 * (batch_size + 1) * mean_t),
                ).estimate
            except HitCountExhaustedError as exc:
                raise HitCountExhaustedError(
                    exc.trials, f"hit counting exhausted at iteration {i}: {exc}"
                ) from exc
            rho[i] = est
            mean_t = 0.8 * mean_t + 0.2 * est

    state = ChainState(proposals[0], float(rho[0]), 0, 0)
    index = np.empty(iterations, dtype=np.int64)
    uniforms = rng.uniform(size=iterations)
    cur = 0
    for i in range(1, iterations + 1):
        if uniforms[i - 1] * rho[cur] < rho[i]:
            cur = i
            state.accepted += 1
        index[i - 1] = cur
    state.iteration = iterations
    state.current_bridge = proposals[cur]
    state.current_rho = float(rho[cur])

    kept = index[burn_in:]
    return PMMHResult(
        chain=[proposals[k] for k in kept],
        rho_hats=rho[kept],
        accepted=state.accepted,
        iterations=iterations,
        proposal_rho_hats=rho,
    )


def alt_mcmc_run(
    model: DiffusionModel,
    reversed_model: DiffusionModel,
    spec: BridgeSpec,
    cfg: CouplingConfig,
    criterion: CrossingCriterion | None = None,
    *,
    iterations: int,
    thin: int = 1,
    rng: np.random.Generator,
    burn_in: int = 0,
    max_attempts: int = 10_000,
    proposal_sampler: Callable[[np.random.Generator], object] | None = None,
    hit_trials: HitTrialsFn | None = None,
    pool_chunk: int = 512,
) -> AltMCMCResult:
    """Alternative exact chain: replace the bridge exactly on reconstruction hits.

    At each iteration one reconstruction is run against the current bridge;
    a hit swaps in a fresh independent approximate bridge, a miss repeats
    the state.  Long runs of repeats are expected, so only every ``thin``-th
    iteration (after ``burn_in``) is returned.  Sojourns are simulated by
    chunked trials and fresh bridges come from a pre-generated pool; both
    are distributionally identical to the one-at-a-time loop.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    grid = spec.grid
    if criterion is None:
        criterion = default_general_criterion(grid.step_size)

    pool_rng = rng.spawn(1)[0]
    if hit_trials is not None or proposal_sampler is not None:
        return _alt_mcmc_sequential(
            model, reversed_model, spec, cfg, criterion, iterations, thin, rng,
            burn_in, max_attempts, proposal_sampler, hit_trials, pool_rng, pool_chunk,
        )

    # The chain is an assembly of i.i.d. (bridge, sojourn) pairs: while the
    # chain sits at a bridge, the per-iteration hit tests are i.i.d., so the
    # sojourn is that bridge's first-hit count.  Segments therefore run in
    # vectorised waves instead of one trial at a time.
    retained: list = []
    replacements = -1  # initial bridge is not a replacement
    segment_start = 0
    mean_sojourn = 4.0
    wave: list[ApproximateBridge] = []
    while segment_start <= iterations:
        if not wave:
            remaining = iterations - segment_start + 1
            size = int(np.clip(np.ceil(1.3 * remaining / mean_sojourn), 8, pool_chunk))
            wave = _default_proposals(
                model, reversed_model, grid, spec, cfg, criterion,
                pool_rng.spawn(size), max_attempts,
            )
            cap = remaining + 1
            sojourns = first_hit_counts(
                wave, model, reversed_model, cfg, criterion, cap, rng, on_cap="clip"
            )
            mean_sojourn = max(1.0, float(np.mean(np.minimum(sojourns, cap))))
            wave = list(zip(wave, sojourns))[::-1]  # pop from the end
        bridge_j, sojourn = wave.pop()
        replacements += 1
        segment_end = min(segment_start + int(sojourn) - 1, iterations)
        lo = max(segment_start, burn_in + 1, 1)
        if segment_end >= lo:
            retained.extend([bridge_j] * (segment_end // thin - (lo - 1) // thin))
        segment_start += int(sojourn)
    return AltMCMCResult(
        chain=retained, replacements=max(replacements, 0), iterations=iterations, thin=thin
    )


def _alt_mcmc_sequential(
    model, reversed_model, spec, cfg, criterion, iterations, thin, rng,
    burn_in, max_attempts, proposal_sampler, hit_trials, pool_rng, pool_chunk,
):
    grid = spec.grid
    if hit_trials is None:
        hit_trials = _real_hit_trials(model, reversed_model, cfg, criterion, grid)
    pool: list = []

    def next_bridge():
        if proposal_sampler is not None:
            return proposal_sampler(pool_rng)
        if not pool:
            pool.extend(
                _default_proposals(
                    model, reversed_model, grid, spec, cfg, criterion,
                    pool_rng.spawn(pool_chunk), max_attempts,
                )
            )
        return pool.pop()

    current = next_bridge()
    retained: list = []
    replacements = 0
    m = 1
    while m <= iterations:
        remaining = iterations - m + 1
        found = None
        offset = 0
        chunk = 8
        while offset < remaining:
            k = min(chunk, remaining - offset)
            hits = np.asarray(hit_trials(current, k, rng), dtype=bool)
            pos = np.nonzero(hits)[0]
            if pos.size:
                found = offset + int(pos[0]) + 1
                break
            offset += k
            chunk = min(chunk * 2, 8192)
        hold_end = iterations if found is None else m + found - 2
        lo = max(m, burn_in + 1)
        if hold_end >= lo:
            retained.extend([current] * (hold_end // thin - (lo - 1) // thin))
        if found is None:
            break
        replacement_at = m + found - 1
        fresh = next_bridge()
        if replacement_at > burn_in and replacement_at % thin == 0:
            retained.append(fresh)
        current = fresh
        replacements += 1
        m = replacement_at + 1
    return AltMCMCResult(
        chain=retained, replacements=replacements, iterations=iterations, thin=thin
    )


@dataclass(frozen=True)
class RegressionFit:
    intercept: float
    slope: float
    intercept_se: float
    slope_se: float


def pi_variance_regression(pairs: Sequence[tuple[int, float]]) -> RegressionFit:
    """OLS of empirical rho_hat variances on 1/N.

    The intercept estimates the variance of 1/pi_T over the bridge law; the
    slope estimates E[(1 - pi_T)/pi_T^2].  Standard errors use the usual
    homoskedastic formulas (requires >= 3 points; with exactly two they are
    returned as nan).
    """
    pairs = list(pairs)
    if len({n for n, _ in pairs}) < 2:
        raise ValueError("need at least two distinct batch sizes")
    x = np.array([1.0 / n for n, _ in pairs])
    y = np.array([v for _, v in pairs])
    xbar = x.mean()
    ybar = y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    intercept = ybar - slope * xbar
    n = len(pairs)
    if n > 2:
        resid = y - (intercept + slope * x)
        s2 = float(np.sum(resid**2) / (n - 2))
        slope_se = float(np.sqrt(s2 / sxx))
        intercept_se = float(np.sqrt(s2 * (1.0 / n + xbar**2 / sxx)))
    else:
        slope_se = float("nan")
        intercept_se = float("nan")
    return RegressionFit(float(intercept), slope, intercept_se, slope_se)


@dataclass
class PiRegressionResult:
    pairs: list[tuple[int, float]]
    fit: RegressionFit
    implied_pi: float
    predicted_slope: float


def pi_regression_experiment(
    model: DiffusionModel,
    reversed_model: DiffusionModel,
    spec: BridgeSpec,
    cfg: CouplingConfig,
    criterion: CrossingCriterion | None = None,
    *,
    batch_sizes: Sequence[int] = (50, 100, 150, 200, 300),
    iterations: int = 3000,
    burn_in: int = 200,
    rng: np.random.Generator,
    max_attempts: int = 10_000,
    max_trials: int = 10_000,
) -> PiRegressionResult:
    """Run the chain at several batch sizes and regress variances on 1/N.

    ``implied_pi`` is the reciprocal of the pooled post-burn-in rho_hat
    mean (meaningful when the intercept is consistent with zero, i.e.
    pi_T is essentially constant); ``predicted_slope`` is the slope the
    geometric model implies for that constant, (1 - pi)/pi^2.
    """
    pairs: list[tuple[int, float]] = []
    pooled: list[Array] = []
    for n_batch in batch_sizes:
        run = pm_mh_run(
            model,
            reversed_model,
            spec,
            cfg,
            criterion,
            iterations=burn_in + iterations,
            batch_size=int(n_batch),
            rng=rng.spawn(1)[0],
            burn_in=burn_in,
            max_attempts=max_attempts,
            max_trials=max_trials,
        )
        pairs.append((int(n_batch), float(np.var(run.rho_hats, ddof=1))))
        pooled.append(run.rho_hats)
    fit = pi_variance_regression(pairs)
    mean_rho = float(np.mean(np.concatenate(pooled)))
    implied_pi = 1.0 / mean_rho
    predicted_slope = (1.0 - implied_pi) / implied_pi**2
    return PiRegressionResult(pairs, fit, implied_pi, predicted_slope)


def chain_marginal(chain: Sequence[ApproximateBridge], grid_index: int) -> Array:
    """States of every chain element at one grid index, stacked (M, d)."""
    return np.stack([b.path.states[grid_index] for b in chain])
