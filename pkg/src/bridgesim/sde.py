"""Diffusion models, time grids, sample paths and Euler-scheme transport.

A diffusion is described by its drift ``alpha`` and dispersion matrix
``sigma`` through

    dX_t = alpha(X_t) dt + sigma(X_t) dW_t,

with ``W`` a d-dimensional Wiener process.  Conventions used throughout the
package:

* state arrays carry the coordinate axis last, so ``drift`` must map
  ``(..., d) -> (..., d)`` (broadcasting over leading axes is what makes the
  batched replicate drivers fast);
* ``diffusion`` maps a single state ``(d,) -> (d, d)``; models whose
  dispersion does not depend on the state should set ``constant_diffusion``
  instead, which unlocks the vectorised fast paths.  A state-dependent
  ``diffusion`` only needs to accept ``(..., d) -> (..., d, d)`` when the
  model is used with the batched drivers;
* ``sigma(x)`` must be invertible wherever the simulator visits, and
  ``V(x) = sigma(x) sigma(x)^T`` symmetric positive definite.  This is a
  user obligation (as is the regularity needed for a unique strong
  solution); the library raises where a singular matrix is actually hit.

Paths and their driving Wiener increments are interchangeable: simulating a
path records the increments that produced it, and ``recover_increments``
inverts an arbitrary path back to increments, exactly, via

    dW_i = sigma(x_{i-1})^{-1} (x_i - x_{i-1} - alpha(x_{i-1}) delta).

Replicates are made independent and reproducible by deriving one generator
per replicate with ``replicate_rng(base_seed, index)``; the derivation uses
``numpy`` seed sequences with the index as spawn key, so a replicate's
stream never depends on how many other replicates run beside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray

__all__ = [
    "DiffusionModel",
    "TimeGrid",
    "SamplePath",
    "WienerIncrements",
    "SimulationBlowupError",
    "SingularDiffusionError",
    "euler_step",
    "simulate_path",
    "recover_increments",
    "replicate_rng",
    "task_rng",
    "write_path_csv",
    "read_path_csv",
]


class SimulationBlowupError(RuntimeError):
    """A simulated state became non-finite; the replicate must be discarded."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class SingularDiffusionError(RuntimeError):
    """The dispersion matrix could not be inverted along a path."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"singular diffusion matrix at step {step}")


@dataclass(frozen=True)
class DiffusionModel:
    """Coefficients of a time-homogeneous diffusion.

    ``invariant_log_density`` (log of the stationary density, up to an
    additive constant is enough for drift reversal) and
    ``analytic_reversed_drift`` are optional; they enable time reversal and
    reversibility checks.  ``constant_diffusion`` declares sigma to be
    state-independent.
    """

    dim: int
    drift: Callable[[Array], Array]
    diffusion: Optional[Callable[[Array], Array]] = None
    invariant_log_density: Optional[Callable[[Array], Array]] = None
    analytic_reversed_drift: Optional[Callable[[Array], Array]] = None
    constant_diffusion: Optional[Array] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        identity = False
        if self.constant_diffusion is not None:
            sig = np.atleast_2d(np.asarray(self.constant_diffusion, dtype=float))
            if sig.shape != (self.dim, self.dim):
                raise ValueError(f"constant_diffusion must be {self.dim}x{self.dim}")
            object.__setattr__(self, "constant_diffusion", sig)
            identity = bool(np.array_equal(sig, np.eye(self.dim)))
            if self.diffusion is None:
                object.__setattr__(
                    self,
                    "diffusion",
                    lambda x, _s=sig: np.broadcast_to(
                        _s, np.shape(x)[:-1] + _s.shape
                    ),
                )
        elif self.diffusion is None:
            raise ValueError("either diffusion or constant_diffusion is required")
        object.__setattr__(self, "_identity_diffusion", identity)

    def diffusion_at(self, x: Array) -> Array:
        """sigma evaluated at ``x``, shaped ``(..., d, d)``."""
        if self.constant_diffusion is not None:
            return np.broadcast_to(
                self.constant_diffusion, np.shape(x)[:-1] + (self.dim, self.dim)
            )
        return self.diffusion(np.asarray(x, dtype=float))

    def v_matrix(self, x: Array) -> Array:
        """V(x) = sigma(x) sigma(x)^T."""
        sig = self.diffusion_at(x)
        return np.einsum("...ik,...jk->...ij", sig, sig)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with N steps of size delta = T / N."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def step_size(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> Array:
        return np.linspace(0.0, self.horizon, self.steps + 1)


@dataclass(frozen=True)
class SamplePath:
    """States observed on a uniform time grid: ``states[i]`` at ``i * delta``."""

    grid: TimeGrid
    states: Array

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2:
            raise ValueError("states must be a (N+1, d) array")
        if states.shape[0] != self.grid.steps + 1:
            raise ValueError(
                f"expected {self.grid.steps + 1} states, got {states.shape[0]}"
            )
        object.__setattr__(self, "states", states)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def reversed(self) -> "SamplePath":
        """The same states traversed backwards in time."""
        return SamplePath(self.grid, self.states[::-1].copy())


@dataclass(frozen=True)
class WienerIncrements:
    """Driving increments dW_i, i = 1..N, each with covariance delta * I."""

    increments: Array

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 2:
            raise ValueError("increments must be a (N, d) array")
        object.__setattr__(self, "increments", inc)

    def __len__(self) -> int:
        return self.increments.shape[0]


def euler_step(model: DiffusionModel, x: Array, dt: float, dw: Array) -> Array:
    """One Euler step x + alpha(x) dt + sigma(x) dw.

    Broadcasts over leading axes of ``x`` and ``dw``; a non-finite result
    signals a blown-up replicate and is the caller's job to detect.
    """
    x = np.asarray(x, dtype=float)
    dw = np.asarray(dw, dtype=float)
    out = x + model.drift(x) * dt
    if getattr(model, "_identity_diffusion", False):
        out = out + dw
    elif model.constant_diffusion is not None:
        out = out + dw @ model.constant_diffusion.T
    else:
        out = out + np.einsum("...ij,...j->...i", model.diffusion(x), dw)
    return out


def euler_states(model: DiffusionModel, x0: Array, increments: Array, dt: float) -> Array:
    """Drive the Euler recursion from ``x0`` with given increments.

    ``x0`` is ``(d,)`` or ``(R, d)``, ``increments`` ``(R, N, d)`` (or
    ``(N, d)`` for a single path).  Returns all visited states,
    ``(R, N + 1, d)``.  Purely deterministic given the increments; blow-ups
    propagate as non-finite rows for the caller to mask.
    """
    increments = np.asarray(increments, dtype=float)
    single = increments.ndim == 2
    if single:
        increments = increments[None]
    n_rep, n_steps, dim = increments.shape
    states = np.empty((n_rep, n_steps + 1, dim))
    states[:, 0] = np.asarray(x0, dtype=float)
    with np.errstate(all="ignore"):
        for i in range(1, n_steps + 1):
            states[:, i] = euler_step(model, states[:, i - 1], dt, increments[:, i - 1])
    return states[0] if single else states


def implied_increments(model: DiffusionModel, states: Array, dt: float) -> Array:
    """Increments that make the Euler recursion reproduce ``states`` exactly.

    ``states`` is ``(N+1, d)`` or ``(R, N+1, d)``; the result drops the
    leading axis in the single-path case.
    """
    states = np.asarray(states, dtype=float)
    single = states.ndim == 2
    if single:
        states = states[None]
    prev = states[:, :-1]
    rhs = states[:, 1:] - prev - model.drift(prev) * dt
    try:
        if model.constant_diffusion is not None:
            out = np.linalg.solve(
                model.constant_diffusion, rhs.reshape(-1, rhs.shape[-1]).T
            ).T.reshape(rhs.shape)
        else:
            out = np.linalg.solve(model.diffusion(prev), rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularDiffusionError(_first_singular_step(model, prev)) from exc
    return out[0] if single else out


def _first_singular_step(model: DiffusionModel, prev: Array) -> int:
    sig = model.diffusion_at(prev)
    dets = np.abs(np.linalg.det(sig.reshape(-1, sig.shape[-2], sig.shape[-1])))
    bad = np.nonzero(dets == 0.0)[0]
    return int(bad[0]) if bad.size else 0


def simulate_path(
    model: DiffusionModel,
    x0: Array,
    grid: TimeGrid,
    rng: np.random.Generator,
) -> tuple[SamplePath, WienerIncrements]:
    """Euler-simulate one path from ``x0`` and return it with its increments.

    The N x d increment block is drawn up front in a single call, so a fixed
    seed yields a bit-identical path on every run.  A non-finite state
    raises :class:`SimulationBlowupError` carrying the offending step.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.dim,):
        raise ValueError(f"x0 must have shape ({model.dim},)")
    dt = grid.step_size
    increments = rng.standard_normal((grid.steps, model.dim)) * np.sqrt(dt)
    states = euler_states(model, x0, increments, dt)
    if not np.all(np.isfinite(states)):
        bad = np.nonzero(~np.isfinite(states).all(axis=1))[0]
        raise SimulationBlowupError(int(bad[0]))
    return SamplePath(grid, states), WienerIncrements(increments)


def recover_increments(model: DiffusionModel, path: SamplePath) -> WienerIncrements:
    """Invert a path to the Wiener increments that drive it.

    Re-simulating from ``path.states[0]`` with the result reproduces the
    path to machine precision (round-trip identity).
    """
    inc = implied_increments(model, path.states, path.grid.step_size)
    if not np.all(np.isfinite(inc)):
        bad = np.nonzero(~np.isfinite(inc).all(axis=1))[0]
        raise SingularDiffusionError(int(bad[0]))
    return WienerIncrements(inc)


def replicate_rng(base_seed: int, replicate_index: int) -> np.random.Generator:
    """Independent generator for one replicate of a batch.

    Seed-splitting rule: replicate ``i`` of a run with ``base_seed`` uses
    ``SeedSequence(base_seed, spawn_key=(i,))``.  Streams are independent
    across indices and stable across batch compositions.
    """
    return np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(replicate_index,)))


def task_rng(base_seed: int, *key: int) -> np.random.Generator:
    """Generator for a keyed subtask (e.g. iteration, interval) of a run."""
    return np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=tuple(key)))


def write_path_csv(path: SamplePath, file) -> None:
    """Write ``t,x1,...,xd`` rows at full double precision."""
    d = path.dim
    header = "t," + ",".join(f"x{j + 1}" for j in range(d))
    data = np.column_stack([path.grid.times, path.states])
    np.savetxt(file, data, delimiter=",", header=header, comments="", fmt="%.17g")


def read_path_csv(file) -> SamplePath:
    data = np.atleast_2d(np.loadtxt(file, delimiter=",", skiprows=1))
    times = data[:, 0]
    steps = len(times) - 1
    if steps < 1:
        raise ValueError("path file must contain at least two grid points")
    return SamplePath(TimeGrid(float(times[-1] - times[0]), steps), data[:, 1:])
