"""The gamma-family of Wiener couplings.

Two copies of the same diffusion are driven by dependent Wiener processes so
that their paths tend to meet.  Given the leading state ``x`` and the
follower state ``x'``, the separating direction (in noise coordinates) is

    u(x, x') = sigma(x')^{-1} (x - x') / |sigma(x')^{-1} (x - x')|,

``Pi = u u^T`` projects onto it, and the follower's increment is

    dW' = {I - (1 - gamma) Pi} O dW + sqrt(1 - gamma^2) u dB,

with ``gamma in [-1, 1)``, ``dB`` an independent scalar Wiener increment and
``O`` an optional orthogonal correction (the polar factor of
``sigma(x)^T sigma(x')``) that makes the joint law depend on sigma only
through V = sigma sigma^T.  gamma = -1 reflects the increment in the plane
orthogonal to u (H = I - 2 Pi, no dB term); gamma = 0 replaces the component
along u by the independent noise.  gamma = 1 (identical driving noise) is
excluded: the copies would never meet.

In one dimension Pi = 1 and the rule collapses to
``dW' = gamma dW + sqrt(1 - gamma^2) dB``.

All functions are pure and stateless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sde import Array, DiffusionModel

__all__ = [
    "CouplingConfig",
    "DegenerateDirectionError",
    "AmbiguousPolarFactorError",
    "COINCIDENCE_TOL",
    "states_coincide",
    "coupling_direction",
    "projection_matrix",
    "reflection_matrix",
    "orthogonal_correction",
    "coupled_increment",
    "sqrt_one_minus_gamma_sq",
]

# |x - x'| <= COINCIDENCE_TOL * (1 + |x|) is below meaningful numerical
# resolution; callers treat such pairs as already coupled.
COINCIDENCE_TOL = 1e-14


class DegenerateDirectionError(ValueError):
    """x and x' coincide, so no separating direction exists."""


class AmbiguousPolarFactorError(np.linalg.LinAlgError):
    """sigma(x)^T sigma(x') is rank deficient; its polar factor is not unique."""


@dataclass(frozen=True)
class CouplingConfig:
    """gamma and the policy for the orthogonal correction O.

    ``orthogonal_correction=False`` takes O = I, which is exact for every
    model shipped here (constant sigma) and cheaper in general; the SVD
    route is available when a state-dependent sigma introduces a rotation
    that must be counterbalanced.
    """

    gamma: float
    orthogonal_correction: bool = False

    def __post_init__(self):
        if not (-1.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [-1, 1); gamma = 1 is excluded")


def sqrt_one_minus_gamma_sq(gamma: float) -> float:
    # factored form stays accurate near |gamma| = 1
    return np.sqrt((1.0 - gamma) * (1.0 + gamma))


def states_coincide(x: Array, xp: Array) -> bool:
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    return bool(
        np.linalg.norm(x - xp) <= COINCIDENCE_TOL * (1.0 + np.linalg.norm(x))
    )


def coupling_direction(x: Array, xp: Array, sigma_at_xp: Array) -> Array:
    """Unit vector u such that sigma(x') u points from x' towards x."""
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    if states_coincide(x, xp):
        raise DegenerateDirectionError("states coincide; treat the pair as coupled")
    w = np.linalg.solve(np.asarray(sigma_at_xp, dtype=float), x - xp)
    norm = np.linalg.norm(w)
    if norm == 0.0:
        raise DegenerateDirectionError("separating vector vanished in noise coordinates")
    return w / norm


def projection_matrix(u: Array) -> Array:
    """Orthogonal projection u u^T onto the span of the unit vector u."""
    u = np.asarray(u, dtype=float)
    return np.outer(u, u)


def reflection_matrix(u: Array) -> Array:
    """Reflection I - 2 u u^T in the plane orthogonal to the unit vector u."""
    u = np.asarray(u, dtype=float)
    return np.eye(u.shape[0]) - 2.0 * np.outer(u, u)


def orthogonal_correction(sigma_x: Array, sigma_xp: Array, rtol: float = 1e-12) -> Array:
    """Closest orthogonal matrix (Frobenius norm) to sigma(x)^T sigma(x').

    This is the polar factor A B^T of the SVD A S B^T.  It is unique only
    when the product has full rank; a rank-deficient product raises
    :class:`AmbiguousPolarFactorError` rather than guessing a factor.
    """
    m = np.asarray(sigma_x, dtype=float).T @ np.asarray(sigma_xp, dtype=float)
    u, s, vt = np.linalg.svd(m)
    if s[0] == 0.0 or s[-1] <= rtol * s[0]:
        raise AmbiguousPolarFactorError(
            "sigma(x)^T sigma(x') is rank deficient; polar factor not unique"
        )
    return u @ vt


def coupled_increment(
    dw: Array,
    db: float,
    x: Array,
    xp: Array,
    model: DiffusionModel,
    cfg: CouplingConfig,
) -> Array:
    """Follower increment {I - (1-gamma) Pi} O dW + sqrt(1-gamma^2) u dB.

    ``dw`` drives the leading copy at state ``x``; the follower sits at
    ``x'``.  Raises :class:`DegenerateDirectionError` when the states
    coincide (the caller should have detected coupling already).
    """
    dw = np.asarray(dw, dtype=float)
    u = coupling_direction(x, xp, model.diffusion_at(xp))
    if cfg.orthogonal_correction:
        o = orthogonal_correction(model.diffusion_at(x), model.diffusion_at(xp))
        w = o @ dw
    else:
        w = dw
    return (
        w
        - (1.0 - cfg.gamma) * u * (u @ w)
        + sqrt_one_minus_gamma_sq(cfg.gamma) * float(db) * u
    )
