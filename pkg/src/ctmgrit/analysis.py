"""Post-processing of combined solutions: quadrature, sampling, mode detection."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter

from .combination import CombinationScheme, interpolant


def combined_mass(scheme: CombinationScheme, states) -> float:
    """Trapezoidal integral of the combined solution (zero boundary values)."""
    total = 0.0
    for c, g, u in zip(scheme.coefficients, scheme.grids, states):
        total += c * float(np.prod(g.h)) * float(np.sum(u))
    return total


def sample_combined(scheme: CombinationScheme, states, axes) -> np.ndarray:
    """Combined solution on the tensor grid spanned by ``axes`` (list of 1D arrays)."""
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    total = np.zeros(len(mesh))
    for c, g, u in zip(scheme.coefficients, scheme.grids, states):
        total += c * interpolant(g, u)(mesh)
    return total.reshape([len(a) for a in axes])


def local_maxima(values: np.ndarray, size: int = 3, rel_height: float = 0.05) -> np.ndarray:
    """Indices of strict-neighbourhood local maxima above ``rel_height * max``.

    Returns an (k, ndim) integer array sorted by decreasing value.
    """
    values = np.asarray(values, dtype=float)
    peak = maximum_filter(values, size=size, mode="constant", cval=-np.inf)
    mask = (values == peak) & (values >= rel_height * values.max())
    idx = np.argwhere(mask)
    order = np.argsort(-values[tuple(idx.T)], kind="stable")
    return idx[order]


def smooth_histogram(pmf: np.ndarray, width: int) -> np.ndarray:
    """Box-filtered lattice histogram, for locating modes of sampled densities."""
    return uniform_filter(np.asarray(pmf, dtype=float), size=width, mode="constant")


def observed_order(levels, errors) -> float:
    """Least-squares slope of ``-log2(error)`` against the level."""
    levels = np.asarray(levels, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if levels.size < 2 or np.any(errors <= 0):
        return float("nan")
    return float(-np.polyfit(levels, np.log2(errors), 1)[0])


def isotropic_level_like(scheme: CombinationScheme) -> tuple[int, ...]:
    """Isotropic full-grid level whose node count is closest to the scheme's total."""
    d = scheme.d
    total = scheme.total_nodes()
    best = min(range(1, 31), key=lambda l: abs(((1 << l) - 1) ** d - total))
    return (best,) * d
