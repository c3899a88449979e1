"""Vectorised drivers shared by the bridge sampler and the exact-MCMC layer.

Everything here is deterministic given its input arrays: random increments
are drawn by the callers, so replicate independence and reproducibility are
decided there.  The replicate axis comes first; rows that blow up turn into
non-finite values which callers mask away (a blown replicate counts as a
rejection, never as a process-level failure).

Crossing/hit detection is shared between the two places it is needed: one
process is the "lead" (the conditioned, data-carrying side: the
backward-simulated path during bridge construction, the candidate bridge
during hit testing) and the other the "follower".  The detection interval
``i`` in ``1..N`` covers ``[(i-1) delta, i delta]``; V and the drift are
evaluated at the lead's state at the left endpoint.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .coupling import COINCIDENCE_TOL, CouplingConfig, sqrt_one_minus_gamma_sq
from .sde import Array, DiffusionModel

NO_COINCIDENCE = -1


def draw_normals(
    rng: np.random.Generator | Sequence[np.random.Generator],
    rows: int,
    shape: tuple[int, ...],
) -> Array:
    """(rows, *shape) standard normals, from one bulk generator or one per row."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal((rows,) + shape)
    if len(rng) != rows:
        raise ValueError("need exactly one generator per row")
    return np.stack([g.standard_normal(shape) for g in rng])


def _sigma_helpers(model: DiffusionModel):
    """(apply, solve) closures mapping noise-space vectors per batch row."""
    if getattr(model, "_identity_diffusion", False):

        def apply(x_prev: Array, vec: Array) -> Array:
            return vec

        solve = apply

    elif model.constant_diffusion is not None:
        sig = model.constant_diffusion
        sig_inv = np.linalg.inv(sig)

        def apply(x_prev: Array, vec: Array) -> Array:
            return vec @ sig.T

        def solve(x_prev: Array, vec: Array) -> Array:
            return vec @ sig_inv.T

    else:

        def apply(x_prev: Array, vec: Array) -> Array:
            return np.einsum("...ij,...j->...i", model.diffusion(x_prev), vec)

        def solve(x_prev: Array, vec: Array) -> Array:
            return np.linalg.solve(model.diffusion(x_prev), vec[..., None])[..., 0]

    return apply, solve


def _row_norms(vec: Array) -> Array:
    return np.sqrt(np.einsum("ri,ri->r", vec, vec))


def _unit_direction(solve, anchor: Array, diff: Array, active: Array) -> Array:
    """u = sigma(anchor)^{-1} diff, normalised, zero on inactive rows."""
    w = solve(anchor, diff)
    norm = _row_norms(w)
    safe = np.where(active & (norm > 0.0), norm, 1.0)
    u = w / safe[:, None]
    u[~active] = 0.0
    return u


def _polar_batch(m: Array) -> Array:
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def coupled_forward_batch(
    model: DiffusionModel,
    cfg: CouplingConfig,
    lead_states: Array,
    lead_increments: Array,
    start: Array,
    db: Array,
    dt: float,
) -> tuple[Array, Array, Array]:
    """Drive followers alongside given lead paths under the gamma-coupling.

    ``lead_states`` is (R, N+1, d) in *forward* time order with
    ``lead_increments`` (R, N, d) the increments that reproduce it under the
    forward drift.  ``start`` ((d,) or (R, d)) seeds the followers and
    ``db`` (R, N) supplies the scalar channel.  Returns the follower states
    (R, N+1, d), the follower increments (R, N, d) and per row the first
    state index at which the pair coincided (NO_COINCIDENCE if never).

    Once a row's states coincide (within ``COINCIDENCE_TOL * (1 + |lead|)``)
    the follower copies the lead from then on; the recorded increments stay
    the ones implied by the copied states so the path/increment round trip
    remains exact.
    """
    lead_states = np.asarray(lead_states, dtype=float)
    n_rep, n_plus_1, dim = lead_states.shape
    n_steps = n_plus_1 - 1
    gamma = cfg.gamma
    s_tail = sqrt_one_minus_gamma_sq(gamma)
    apply_sig, solve_sig = _sigma_helpers(model)
    use_ortho = cfg.orthogonal_correction and model.constant_diffusion is None

    follower = np.empty_like(lead_states)
    follower[:, 0] = np.asarray(start, dtype=float)
    out_increments = np.empty((n_rep, n_steps, dim))
    coupled = np.zeros(n_rep, dtype=bool)
    coincide_idx = np.full(n_rep, NO_COINCIDENCE, dtype=np.int64)

    with np.errstate(all="ignore"):
        for i in range(1, n_steps + 1):
            lead_prev = lead_states[:, i - 1]
            fol_prev = follower[:, i - 1]
            delta = lead_prev - fol_prev
            dist = _row_norms(delta)
            threshold = COINCIDENCE_TOL * (1.0 + _row_norms(lead_prev))
            newly = ~coupled & (dist <= threshold)
            coincide_idx[newly] = i - 1
            coupled |= newly
            active = ~coupled

            u = _unit_direction(solve_sig, fol_prev, delta, active)
            dw = lead_increments[:, i - 1]
            if use_ortho:
                sig_lead = model.diffusion(lead_prev)
                sig_fol = model.diffusion(fol_prev)
                o = _polar_batch(np.einsum("rji,rjk->rik", sig_lead, sig_fol))
                dw = np.einsum("rij,rj->ri", o, dw)
            proj = np.sum(u * dw, axis=-1)
            dwp = dw - (1.0 - gamma) * u * proj[:, None] + s_tail * db[:, i - 1, None] * u

            drift = model.drift(fol_prev)
            stepped = fol_prev + drift * dt + apply_sig(fol_prev, dwp)
            copied = lead_states[:, i]
            implied = solve_sig(fol_prev, copied - fol_prev - drift * dt)

            follower[:, i] = np.where(coupled[:, None], copied, stepped)
            out_increments[:, i - 1] = np.where(coupled[:, None], implied, dwp)

    return follower, out_increments, coincide_idx


def inverse_coupled_batch(
    model: DiffusionModel,
    cfg: CouplingConfig,
    lead_states: Array,
    lead_increments: Array,
    start: Array,
    du: Array,
    dt: float,
) -> tuple[Array, Array]:
    """Reconstruct the conditioning process from a follower-role path.

    This inverts the coupling map: given a path ``lead_states`` with its
    driving increments (here the lead plays the follower role of the
    original construction, e.g. a candidate bridge) and fresh scalar noise
    ``du`` (R, N), it drives

        x_i = x_{i-1} + alpha(x_{i-1}) dt
              + sigma(x_{i-1}) [ O^T {I - (1-gamma) Pi} dW_i
                                 + sqrt(1-gamma^2) O^T u dU_i ],

    with u, Pi, O evaluated at (x_{i-1}, lead_{i-1}).  ``lead_states`` may
    be (N+1, d) (shared across rows) or (R, N+1, d).  Returns the states
    (R, N+1, d) and the first coincidence index per row (NO_COINCIDENCE if
    none); after coincidence the reconstruction copies the lead.
    """
    lead_states = np.asarray(lead_states, dtype=float)
    start = np.atleast_2d(np.asarray(start, dtype=float))
    n_rep = start.shape[0]
    if lead_states.ndim == 2:
        lead_states = np.broadcast_to(lead_states, (n_rep,) + lead_states.shape)
    lead_increments = np.asarray(lead_increments, dtype=float)
    if lead_increments.ndim == 2:
        lead_increments = np.broadcast_to(
            lead_increments, (n_rep,) + lead_increments.shape
        )
    n_steps = lead_states.shape[1] - 1
    dim = lead_states.shape[2]
    gamma = cfg.gamma
    s_tail = sqrt_one_minus_gamma_sq(gamma)
    apply_sig, solve_sig = _sigma_helpers(model)
    use_ortho = cfg.orthogonal_correction and model.constant_diffusion is None

    states = np.empty((n_rep, n_steps + 1, dim))
    states[:, 0] = start
    coupled = np.zeros(n_rep, dtype=bool)
    coincide_idx = np.full(n_rep, NO_COINCIDENCE, dtype=np.int64)

    with np.errstate(all="ignore"):
        for i in range(1, n_steps + 1):
            x_prev = states[:, i - 1]
            z_prev = lead_states[:, i - 1]
            delta = x_prev - z_prev
            dist = _row_norms(delta)
            threshold = COINCIDENCE_TOL * (1.0 + _row_norms(x_prev))
            newly = ~coupled & (dist <= threshold)
            coincide_idx[newly] = i - 1
            coupled |= newly
            active = ~coupled

            u = _unit_direction(solve_sig, z_prev, delta, active)
            dw = lead_increments[:, i - 1]
            proj = np.sum(u * dw, axis=-1)
            inner = dw - (1.0 - gamma) * u * proj[:, None] + s_tail * du[:, i - 1, None] * u
            if use_ortho:
                sig_x = model.diffusion(x_prev)
                sig_z = model.diffusion(z_prev)
                o = _polar_batch(np.einsum("rji,rjk->rik", sig_x, sig_z))
                inner = np.einsum("rji,rj->ri", o, inner)  # O^T applied
            drift = model.drift(x_prev)
            stepped = x_prev + drift * dt + apply_sig(x_prev, inner)
            states[:, i] = np.where(coupled[:, None], lead_states[:, i], stepped)

    return states, coincide_idx


def first_crossing_batch(
    model: DiffusionModel,
    kind: str,
    proximity_threshold: float,
    lead: Array,
    follower: Array,
    dt: float,
    coincide_idx: Array | None = None,
) -> Array:
    """First interval (1..N) in which each lead/follower pair crossed; 0 if none.

    ``kind`` selects the bilinear sign-flip test (optionally gated by
    ``|lead - follower| <= proximity_threshold`` at the interval start) or
    the reflection mid-plane test.  Exact state coincidence at index k
    counts as a crossing in interval max(k, 1).
    """
    lead = np.asarray(lead, dtype=float)
    follower = np.asarray(follower, dtype=float)
    if lead.ndim == 2:
        lead = lead[None]
        follower = follower[None]
    diffs = lead - follower
    prev_diff = diffs[:, :-1]
    lead_prev = lead[:, :-1]

    with np.errstate(all="ignore"):
        if getattr(model, "_identity_diffusion", False):
            w = prev_diff
        elif model.constant_diffusion is not None:
            sig = model.constant_diffusion
            v_inv = np.linalg.inv(sig @ sig.T)
            w = prev_diff @ v_inv.T
        else:
            v = model.v_matrix(lead_prev)
            w = np.linalg.solve(v, prev_diff[..., None])[..., 0]

        if kind == "general":
            s = np.einsum("rni,rni->rn", w, diffs[:, 1:])
            crossed = s < 0.0
            if proximity_threshold > 0.0:
                crossed &= (
                    np.einsum("rni,rni->rn", prev_diff, prev_diff)
                    <= proximity_threshold**2
                )
        elif kind == "reflection":
            lhs = np.einsum("rni,rni->rn", lead[:, 1:], w)
            rhs = np.einsum(
                "rni,rni->rn",
                dt * model.drift(lead_prev) + 0.5 * (lead_prev + follower[:, :-1]),
                w,
            )
            crossed = lhs <= rhs
        else:
            raise ValueError(f"unknown crossing criterion kind {kind!r}")

    if coincide_idx is not None:
        rows = np.nonzero(coincide_idx != NO_COINCIDENCE)[0]
        if rows.size:
            cols = np.maximum(coincide_idx[rows], 1) - 1
            crossed[rows, cols] = True

    has = crossed.any(axis=1)
    first = crossed.argmax(axis=1)
    return np.where(has, first + 1, 0).astype(np.int64)


def finite_rows(*arrays: Array) -> Array:
    """Mask of rows whose entries are finite in every given array."""
    mask = None
    for arr in arrays:
        ok = np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1)
        mask = ok if mask is None else (mask & ok)
    return mask
