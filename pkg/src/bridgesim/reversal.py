"""Time reversal of ergodic diffusions and numerical reversibility checks.

For an ergodic diffusion with stationary density ``nu``, running the
stationary process backwards in time yields another diffusion with the same
dispersion and drift

    alpha*_i(x) = -alpha_i(x) + nu(x)^{-1} sum_j d/dx_j ( nu(x) V(x)_{ij} ),

equivalently ``alpha* = -alpha + V grad(log nu) + div V`` with
``(div V)_i = sum_j d/dx_j V_ij``.  The local integrability of
``sum_j d_j(nu V_ij)`` is assumed, not verified; it is a model obligation.

The process is time-reversible (its forward and reversed transition laws
coincide) exactly when ``alpha = alpha*``, i.e.

    alpha_i(x) = 1/2 [ V grad(log nu) + div V ]_i,

which :func:`is_time_reversible` checks numerically on a set of probe
points.  Derivatives are central finite differences with bandwidth
``cbrt(eps) * (1 + |x_j|)`` per coordinate, the standard choice for first
derivatives.  The certificate is numerical, not a proof.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.stats import qmc

from .sde import Array, DiffusionModel

__all__ = [
    "UnsupportedModelError",
    "ReversedModel",
    "reverse_model",
    "reversed_drift",
    "reversibility_residual",
    "is_time_reversible",
    "latin_hypercube_probes",
]

_FD_BANDWIDTH = float(np.cbrt(np.finfo(float).eps))


class UnsupportedModelError(ValueError):
    """The model lacks the ingredients (alpha* or log nu) for the operation."""


def _grad_log_density(model: DiffusionModel, x: Array) -> Array:
    logd = model.invariant_log_density
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(model.dim):
        h = _FD_BANDWIDTH * (1.0 + np.abs(x[..., j]))
        xp = x.copy()
        xm = x.copy()
        xp[..., j] += h
        xm[..., j] -= h
        out[..., j] = (logd(xp) - logd(xm)) / (2.0 * h)
    return out


def _divergence_of_v(model: DiffusionModel, x: Array) -> Array:
    if model.constant_diffusion is not None:
        return np.zeros_like(np.asarray(x, dtype=float))
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for j in range(model.dim):
        h = _FD_BANDWIDTH * (1.0 + np.abs(x[..., j]))
        xp = x.copy()
        xm = x.copy()
        xp[..., j] += h
        xm[..., j] -= h
        dv = (model.v_matrix(xp) - model.v_matrix(xm)) / (2.0 * h)[..., None, None]
        out += dv[..., :, j]
    return out


def reversed_drift(model: DiffusionModel, x: Array) -> Array:
    """Drift of the time-reversed diffusion at ``x``.

    Uses the model's analytic reversed drift when supplied, otherwise
    evaluates ``-alpha + V grad(log nu) + div V`` by central finite
    differences of the invariant log density.
    """
    if model.analytic_reversed_drift is not None:
        return model.analytic_reversed_drift(np.asarray(x, dtype=float))
    if model.invariant_log_density is None:
        raise UnsupportedModelError(
            "time reversal needs analytic_reversed_drift or invariant_log_density"
        )
    x = np.asarray(x, dtype=float)
    grad = _grad_log_density(model, x)
    v = model.v_matrix(x)
    return -model.drift(x) + np.einsum("...ij,...j->...i", v, grad) + _divergence_of_v(model, x)


@dataclass(frozen=True)
class ReversedModel(DiffusionModel):
    """The time-reversed companion of ``base``: drift alpha*, same sigma.

    ``mode`` records how the reversed drift was obtained: "analytic",
    "density" (finite differences of log nu) or "identical" (the model was
    declared time-reversible, so alpha* = alpha).
    """

    base: Optional[DiffusionModel] = None
    mode: str = "analytic"


def reverse_model(model: DiffusionModel, mode: str = "auto") -> ReversedModel:
    """Build the time-reversed model.

    mode "auto" prefers the analytic reversed drift and falls back to the
    density-based formula; "identical" copies the forward drift and is only
    meaningful for time-reversible models.
    """
    if mode == "auto":
        if model.analytic_reversed_drift is not None:
            mode = "analytic"
        elif model.invariant_log_density is not None:
            mode = "density"
        else:
            raise UnsupportedModelError(
                "cannot reverse: neither analytic_reversed_drift nor "
                "invariant_log_density is available"
            )
    if mode == "analytic":
        if model.analytic_reversed_drift is None:
            raise UnsupportedModelError("model has no analytic reversed drift")
        drift = model.analytic_reversed_drift
    elif mode == "density":
        if model.invariant_log_density is None:
            raise UnsupportedModelError("model has no invariant log density")

        def drift(x, _m=model):
            return reversed_drift(
                DiffusionModel(
                    dim=_m.dim,
                    drift=_m.drift,
                    diffusion=_m.diffusion,
                    invariant_log_density=_m.invariant_log_density,
                    constant_diffusion=_m.constant_diffusion,
                ),
                x,
            )

    elif mode == "identical":
        drift = model.drift
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ReversedModel(
        dim=model.dim,
        drift=drift,
        diffusion=model.diffusion,
        invariant_log_density=model.invariant_log_density,
        analytic_reversed_drift=model.drift,  # reversing twice returns the original
        constant_diffusion=model.constant_diffusion,
        base=model,
        mode=mode,
    )


def reversibility_residual(model: DiffusionModel, x: Array) -> Array:
    """alpha(x) - 1/2 [V grad(log nu) + div V](x); zero iff nu-symmetric."""
    if model.invariant_log_density is None:
        raise UnsupportedModelError("reversibility check needs invariant_log_density")
    x = np.asarray(x, dtype=float)
    grad = _grad_log_density(model, x)
    v = model.v_matrix(x)
    half = 0.5 * (
        np.einsum("...ij,...j->...i", v, grad) + _divergence_of_v(model, x)
    )
    return model.drift(x) - half


def is_time_reversible(
    model: DiffusionModel,
    probe_points: Iterable[Array] | Array,
    tol: float = 1e-6,
) -> bool:
    """Numerical reversibility certificate on a set of probe points.

    True iff the reversibility residual has sup-norm below ``tol`` at every
    probe point.
    """
    pts = np.atleast_2d(np.asarray(list(probe_points) if not isinstance(probe_points, np.ndarray) else probe_points, dtype=float))
    res = reversibility_residual(model, pts)
    return bool(np.max(np.abs(res)) < tol)


def latin_hypercube_probes(
    lower: Array,
    upper: Array,
    n: int = 64,
    rng: np.random.Generator | int | None = None,
) -> Array:
    """Latin-hypercube sample of probe points in the box [lower, upper]."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    sampler = qmc.LatinHypercube(d=lower.size, seed=rng)
    return qmc.scale(sampler.random(n), lower, upper)
