"""Reference models: the multivariate Ornstein-Uhlenbeck process with its
exact bridge oracle, and the hyperbolic diffusion.

Ornstein-Uhlenbeck:  dX_t = -B (X_t - A) dt + sigma dW_t.  When every
eigenvalue of B has positive real part the process is ergodic with Gaussian
stationary law N(A, Gamma), where Gamma is the unique symmetric solution of
the Lyapunov equation B Gamma + Gamma B^T = V, V = sigma sigma^T.  The
time-reversed drift matrix is Gamma B^T Gamma^{-1}; the process is
time-reversible iff B^{-1} V is symmetric, in which case Gamma = B^{-1} V / 2.

Because the process is Gaussian, a pinned path ("bridge") can be sampled
exactly: simulate the unconditioned chain with its exact Gaussian
transitions (mean e^{-B dt} x, covariance Gamma_dt) and condition on the
final value by the usual Gaussian correction.  With
Gamma_t = int_0^t e^{-sB} V e^{-sB^T} ds and C_t = cov(X_t, X_T) =
Gamma_t e^{-B^T (T-t)}, the pinned marginal at time t is normal with

    mean  e^{-Bt} x0 + C_t Gamma_T^{-1} (x - e^{-BT} x0)
    cov   Gamma_t - C_t Gamma_T^{-1} C_t^T.

(The trailing exponential carries a transpose; for a symmetric drift matrix
both orderings agree, and the Monte Carlo self-consistency tests pin the
general case down.)

Gamma_t is computed by the block-matrix-exponential construction
(exp of [[B, V], [0, -B^T]] t has Gamma_t = F22^T F12 in its blocks),
combined with the interval-doubling identity
Gamma_{2t} = Gamma_t + e^{-tB} Gamma_t e^{-tB^T} so that only matrix
exponentials of modest norm are ever formed.  There is no quadrature knob.

Hyperbolic diffusion:  dX_t = -a X_t / sqrt(1 + |X_t|^2) dt + dW_t, a > 0.
It is ergodic and time-reversible with stationary density

    nu(x) = (a/pi)^{(d-1)/2} / (2 K_{(d+1)/2}(2a)) * exp(-2a sqrt(1+|x|^2)),

K being the modified Bessel function of the third kind.  Supported state
dimensions: d in {1, 2, 3} (all the normalising constant is ever needed
for here).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.special import kv

from .sde import Array, DiffusionModel, SamplePath, TimeGrid

__all__ = [
    "UnstableDriftError",
    "OUModel",
    "HyperbolicModel",
    "make_ou_model",
    "make_hyperbolic_model",
    "ou_stationary_covariance",
    "ou_gamma_t",
    "ou_transition",
    "ou_exact_bridge_sample",
    "ou_exact_bridge_batch",
    "ou_bridge_marginal",
    "ou_is_reversible",
    "hyperbolic_drift",
    "hyperbolic_log_density",
]


class UnstableDriftError(ValueError):
    """The drift matrix has an eigenvalue with non-positive real part."""


# --------------------------------------------------------------------------
# Ornstein-Uhlenbeck algebra


def _check_stable(drift_matrix: Array) -> Array:
    b = np.atleast_2d(np.asarray(drift_matrix, dtype=float))
    if b.shape[0] != b.shape[1]:
        raise ValueError("drift matrix must be square")
    eig = np.linalg.eigvals(b)
    if np.min(eig.real) <= 0.0:
        raise UnstableDriftError(
            f"drift matrix eigenvalues must have positive real part, got {eig}"
        )
    return b


def ou_stationary_covariance(drift_matrix: Array, v: Array) -> Array:
    """Unique symmetric Gamma with B Gamma + Gamma B^T = V.

    Solved by the Kronecker-vectorised linear system (the intended regime is
    small d).  The residual is verified against 1e-10 * ||V||.
    """
    b = _check_stable(drift_matrix)
    v = np.atleast_2d(np.asarray(v, dtype=float))
    d = b.shape[0]
    eye = np.eye(d)
    coeff = np.kron(b, eye) + np.kron(eye, b)
    gamma = np.linalg.solve(coeff, v.ravel()).reshape(d, d)
    gamma = 0.5 * (gamma + gamma.T)
    residual = np.linalg.norm(b @ gamma + gamma @ b.T - v)
    if residual > 1e-10 * max(np.linalg.norm(v), 1e-300):
        raise UnstableDriftError(
            f"Lyapunov solve failed: residual {residual:.3e} exceeds tolerance"
        )
    return gamma


def _gamma_block(drift_matrix: Array, v: Array, t: float) -> tuple[Array, Array]:
    """(Gamma_t, e^{-tB}) by one block matrix exponential."""
    d = drift_matrix.shape[0]
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = drift_matrix
    block[:d, d:] = v
    block[d:, d:] = -drift_matrix.T
    e = expm(block * t)
    f12 = e[:d, d:]
    f22 = e[d:, d:]  # e^{-B^T t}
    gamma_t = f22.T @ f12
    return 0.5 * (gamma_t + gamma_t.T), f22.T


def ou_gamma_t(drift_matrix: Array, v: Array, t: float) -> Array:
    """Finite-time noise covariance Gamma_t = int_0^t e^{-sB} V e^{-sB^T} ds.

    Gamma_0 = 0; Gamma_t increases (in the psd order) towards the stationary
    Gamma.  Large t is handled by repeated interval doubling so the block
    exponential is only evaluated at modest ||B t||.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    b = np.atleast_2d(np.asarray(drift_matrix, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if t == 0.0:
        return np.zeros_like(v)
    norm = np.linalg.norm(b, 2) * t
    doublings = max(0, int(np.ceil(np.log2(max(norm, 1e-12) / 0.5))))
    gamma, decay = _gamma_block(b, v, t / 2**doublings)
    for _ in range(doublings):
        gamma = gamma + decay @ gamma @ decay.T
        gamma = 0.5 * (gamma + gamma.T)
        decay = decay @ decay
    return gamma


def ou_transition(drift_matrix: Array, v: Array, dt: float) -> tuple[Array, Array]:
    """Exact transition pair: X_{t+dt} | X_t ~ N(e^{-B dt} X_t, Gamma_dt)."""
    b = np.atleast_2d(np.asarray(drift_matrix, dtype=float))
    return expm(-b * dt), ou_gamma_t(b, v, dt)


def ou_is_reversible(drift_matrix: Array, v: Array, rtol: float = 1e-12) -> bool:
    """Time-reversibility test: B^{-1} V symmetric (within rtol, relatively)."""
    b = np.atleast_2d(np.asarray(drift_matrix, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    m = np.linalg.solve(b, v)
    scale = np.linalg.norm(m)
    if scale == 0.0:
        return True
    return bool(np.linalg.norm(m - m.T) <= rtol * scale)


def _bridge_gain_matrices(
    drift_matrix: Array, v: Array, grid: TimeGrid
) -> tuple[Array, Array, Array]:
    """Per-index conditioning gains K_i = cov(X_{t_i}, X_T) Gamma_T^{-1}.

    Returns (K, decay, chol) where K is (N+1, d, d), decay = e^{-B delta}
    and chol the Cholesky factor of Gamma_delta.
    """
    b = _check_stable(drift_matrix)
    d = b.shape[0]
    n = grid.steps
    dt = grid.step_size
    decay, gamma_dt = ou_transition(b, v, dt)
    try:
        chol = np.linalg.cholesky(gamma_dt)
    except np.linalg.LinAlgError as exc:
        raise ValueError("step covariance is not positive definite") from exc
    gammas = np.empty((n + 1, d, d))
    gammas[0] = 0.0
    for i in range(1, n + 1):
        gammas[i] = gamma_dt + decay @ gammas[i - 1] @ decay.T
    gamma_total = gammas[n]
    cond = np.linalg.cond(gamma_total)
    if not np.isfinite(cond) or cond > 1e14:
        raise ValueError("horizon covariance is singular; bridge is degenerate")
    # powers[i] = e^{-B (T - t_i)}
    powers = np.empty((n + 1, d, d))
    powers[n] = np.eye(d)
    for i in range(n - 1, -1, -1):
        powers[i] = decay @ powers[i + 1]
    cov_with_end = np.einsum("nij,nkj->nik", gammas, powers)
    gains = np.linalg.solve(gamma_total.T, cov_with_end.transpose(0, 2, 1)).transpose(0, 2, 1)
    gains[0] = 0.0
    gains[n] = np.eye(d)
    return gains, decay, chol


def ou_exact_bridge_batch(
    drift_matrix: Array,
    v: Array,
    x0: Array,
    x: Array,
    grid: TimeGrid,
    n_paths: int,
    rng: np.random.Generator,
    mean: Array | None = None,
) -> Array:
    """Exact pinned paths, one batch: (n_paths, N + 1, d) states.

    The unconditioned chain runs with its exact Gaussian transitions; each
    state is then shifted by K_i (x - X_T), which conditions the whole path
    on ending at ``x``.  Endpoints are pinned exactly.
    """
    b = np.atleast_2d(np.asarray(drift_matrix, dtype=float))
    d = b.shape[0]
    x0 = np.asarray(x0, dtype=float)
    x = np.asarray(x, dtype=float)
    if mean is not None:
        shift = np.asarray(mean, dtype=float)
        x0 = x0 - shift
        x = x - shift
    gains, decay, chol = _bridge_gain_matrices(b, np.atleast_2d(np.asarray(v, float)), grid)
    n = grid.steps
    states = np.empty((n_paths, n + 1, d))
    states[:, 0] = x0
    noise = rng.standard_normal((n_paths, n, d))
    for i in range(1, n + 1):
        states[:, i] = states[:, i - 1] @ decay.T + noise[:, i - 1] @ chol.T
    residual = x - states[:, n]
    bridged = states + np.einsum("nij,rj->rni", gains, residual)
    bridged[:, 0] = x0
    bridged[:, n] = x
    if mean is not None:
        bridged += shift
    return bridged


def ou_exact_bridge_sample(
    drift_matrix: Array,
    v: Array,
    x0: Array,
    x: Array,
    grid: TimeGrid,
    rng: np.random.Generator,
    mean: Array | None = None,
) -> SamplePath:
    """One exact pinned path from ``x0`` to ``x`` on ``grid``."""
    states = ou_exact_bridge_batch(drift_matrix, v, x0, x, grid, 1, rng, mean)[0]
    return SamplePath(grid, states)


def ou_bridge_marginal(
    drift_matrix: Array,
    v: Array,
    x0: Array,
    x: Array,
    t: float,
    horizon: float = 1.0,
    mean: Array | None = None,
) -> tuple[Array, Array]:
    """Exact Gaussian law of the pinned process at an interior time t.

    Returns (mean vector, covariance matrix); the covariance is symmetric
    positive definite for 0 < t < horizon.
    """
    if not (0.0 < t < horizon):
        raise ValueError("t must lie strictly inside (0, horizon)")
    b = _check_stable(drift_matrix)
    v = np.atleast_2d(np.asarray(v, dtype=float))
    x0 = np.asarray(x0, dtype=float)
    x = np.asarray(x, dtype=float)
    if mean is not None:
        shift = np.asarray(mean, dtype=float)
        x0 = x0 - shift
        x = x - shift
    gamma_t = ou_gamma_t(b, v, t)
    gamma_total = ou_gamma_t(b, v, horizon)
    e_t = expm(-b * t)
    e_rest = expm(-b * (horizon - t))
    cov_with_end = gamma_t @ e_rest.T
    gain = np.linalg.solve(gamma_total.T, cov_with_end.T).T
    mu = e_t @ x0 + gain @ (x - e_rest @ e_t @ x0)
    cov = gamma_t - gain @ cov_with_end.T
    cov = 0.5 * (cov + cov.T)
    if mean is not None:
        mu = mu + shift
    return mu, cov


@dataclass(frozen=True)
class OUModel:
    """Ornstein-Uhlenbeck parameter triple (A, B, sigma) plus derived algebra."""

    mean: Array
    drift_matrix: Array
    diffusion_matrix: Array

    def __post_init__(self):
        b = _check_stable(self.drift_matrix)
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.diffusion_matrix, dtype=float))
        if sigma.shape != b.shape or mean.shape[0] != b.shape[0]:
            raise ValueError("inconsistent OU parameter shapes")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "drift_matrix", b)
        object.__setattr__(self, "diffusion_matrix", sigma)

    @property
    def dim(self) -> int:
        return self.drift_matrix.shape[0]

    @property
    def v(self) -> Array:
        return self.diffusion_matrix @ self.diffusion_matrix.T

    @property
    def stationary_covariance(self) -> Array:
        return ou_stationary_covariance(self.drift_matrix, self.v)

    @property
    def is_reversible(self) -> bool:
        return ou_is_reversible(self.drift_matrix, self.v)

    def as_diffusion_model(self) -> DiffusionModel:
        a = self.mean
        b = self.drift_matrix
        gamma = self.stationary_covariance
        gamma_inv = np.linalg.inv(gamma)
        _, logdet = np.linalg.slogdet(gamma)
        log_norm = -0.5 * (self.dim * np.log(2.0 * np.pi) + logdet)
        reversed_matrix = gamma @ b.T @ gamma_inv

        def drift(x):
            return -(x - a) @ b.T

        def log_density(x):
            centred = x - a
            return log_norm - 0.5 * np.einsum(
                "...i,ij,...j->...", centred, gamma_inv, centred
            )

        def reversed_drift(x):
            return -(x - a) @ reversed_matrix.T

        return DiffusionModel(
            dim=self.dim,
            drift=drift,
            invariant_log_density=log_density,
            analytic_reversed_drift=reversed_drift,
            constant_diffusion=self.diffusion_matrix,
        )


def make_ou_model(mean: Array, drift_matrix: Array, sigma: Array) -> DiffusionModel:
    return OUModel(mean, drift_matrix, sigma).as_diffusion_model()


# --------------------------------------------------------------------------
# Hyperbolic diffusion


def hyperbolic_drift(x: Array, alpha_h: float) -> Array:
    """-a x / sqrt(1 + |x|^2); bounded in norm by a."""
    x = np.asarray(x, dtype=float)
    scale = np.sqrt(1.0 + np.sum(x * x, axis=-1, keepdims=True))
    return -alpha_h * x / scale


def hyperbolic_log_density(x: Array, alpha_h: float, dim: int) -> Array:
    """Log of the stationary density of the hyperbolic diffusion.

    The normalising constant uses the modified Bessel function of order
    (d+1)/2; only d in {1, 2, 3} is supported.
    """
    if dim not in (1, 2, 3):
        raise ValueError("hyperbolic density constant available for d in {1, 2, 3}")
    if alpha_h <= 0:
        raise ValueError("alpha_h must be positive")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise ValueError(f"state dimension mismatch: expected {dim}")
    log_const = (
        0.5 * (dim - 1) * (np.log(alpha_h) - np.log(np.pi))
        - np.log(2.0)
        - np.log(kv((dim + 1) / 2.0, 2.0 * alpha_h))
    )
    return log_const - 2.0 * alpha_h * np.sqrt(1.0 + np.sum(x * x, axis=-1))


@dataclass(frozen=True)
class HyperbolicModel:
    """Hyperbolic diffusion parameters: pull strength and state dimension."""

    alpha_h: float
    dimension: int = 2

    def __post_init__(self):
        if self.alpha_h <= 0:
            raise ValueError("alpha_h must be positive")
        if self.dimension not in (1, 2, 3):
            raise ValueError("dimension must be 1, 2 or 3")

    def as_diffusion_model(self) -> DiffusionModel:
        a = self.alpha_h
        d = self.dimension

        def drift(x):
            return hyperbolic_drift(x, a)

        def log_density(x):
            return hyperbolic_log_density(x, a, d)

        # ergodic and time-reversible: the reversed drift is the drift itself
        return DiffusionModel(
            dim=d,
            drift=drift,
            invariant_log_density=log_density,
            analytic_reversed_drift=drift,
            constant_diffusion=np.eye(d),
        )


def make_hyperbolic_model(alpha_h: float, dim: int = 2) -> DiffusionModel:
    return HyperbolicModel(alpha_h, dim).as_diffusion_model()
