"""Plot-ready distribution diagnostics: Q-Q data, KS distances, empirical copulas.

These quantify the visual comparisons the experiments rest on.  Everything
is read-only over the samples passed in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .sde import Array

__all__ = [
    "qq_data",
    "ks_statistic",
    "empirical_copula",
    "copula_sup_distance",
    "MarginalDiagnostics",
    "gaussian_marginal_diagnostics",
]


def qq_data(
    samples: Array, exact_quantile: Callable[[Array], Array], points: int = 99
) -> tuple[Array, Array, Array]:
    """(p, empirical quantile, exact quantile) at p_j = (j - 1/2) / points."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("samples must be nonempty")
    p = (np.arange(1, points + 1) - 0.5) / points
    return p, np.quantile(samples, p), np.asarray(exact_quantile(p), dtype=float)


def ks_statistic(samples: Array, exact_cdf: Callable[[Array], Array]) -> float:
    """sup-norm distance between the empirical CDF and ``exact_cdf``."""
    samples = np.sort(np.asarray(samples, dtype=float))
    n = samples.size
    if n == 0:
        raise ValueError("samples must be nonempty")
    cdf = np.asarray(exact_cdf(samples), dtype=float)
    upper = np.arange(1, n + 1) / n
    lower = np.arange(0, n) / n
    return float(np.max(np.maximum(np.abs(cdf - upper), np.abs(cdf - lower))))


def empirical_copula(samples2d: Array, lattice: int = 20) -> Array:
    """C(i/k, j/k) on the k x k lattice (i, j = 1..k) from coordinate ranks."""
    samples2d = np.asarray(samples2d, dtype=float)
    if samples2d.ndim != 2 or samples2d.shape[1] != 2:
        raise ValueError("samples2d must be (n, 2)")
    n = samples2d.shape[0]
    u = rankdata(samples2d[:, 0], method="ordinal") / n
    v = rankdata(samples2d[:, 1], method="ordinal") / n
    iu = np.ceil(u * lattice).astype(int) - 1
    iv = np.ceil(v * lattice).astype(int) - 1
    counts = np.zeros((lattice, lattice))
    np.add.at(counts, (iu, iv), 1.0)
    return counts.cumsum(axis=0).cumsum(axis=1) / n


def copula_sup_distance(grid_a: Array, grid_b: Array) -> float:
    return float(np.max(np.abs(np.asarray(grid_a) - np.asarray(grid_b))))


@dataclass
class MarginalDiagnostics:
    """Per-coordinate Q-Q pairs and KS plus the copula comparison."""

    probabilities: Array
    qq_pairs: list[Array]  # per coordinate, (points, 2): empirical, exact
    ks: Array  # per coordinate
    copula_grid: Array
    copula_reference: Array

    @property
    def copula_distance(self) -> float:
        return copula_sup_distance(self.copula_grid, self.copula_reference)


def gaussian_marginal_diagnostics(
    samples2d: Array,
    mean: Array,
    cov: Array,
    reference2d: Array,
    points: int = 99,
    lattice: int = 20,
) -> MarginalDiagnostics:
    """Diagnostics of 2-d samples against a Gaussian law.

    Marginals are compared to the exact normal quantiles/CDFs implied by
    ``mean``/``cov``; the dependence structure is compared to the empirical
    copula of ``reference2d`` (e.g. a large oracle sample).
    """
    from scipy.stats import norm

    samples2d = np.asarray(samples2d, dtype=float)
    mean = np.asarray(mean, dtype=float)
    sds = np.sqrt(np.diag(np.asarray(cov, dtype=float)))
    qq = []
    ks = []
    probs = None
    for j in range(samples2d.shape[1]):
        law = norm(loc=mean[j], scale=sds[j])
        p, emp, exact = qq_data(samples2d[:, j], law.ppf, points)
        probs = p
        qq.append(np.column_stack([emp, exact]))
        ks.append(ks_statistic(samples2d[:, j], law.cdf))
    return MarginalDiagnostics(
        probabilities=probs,
        qq_pairs=qq,
        ks=np.asarray(ks),
        copula_grid=empirical_copula(samples2d, lattice),
        copula_reference=empirical_copula(np.asarray(reference2d, float), lattice),
    )
