"""Sparse grid combination technique: schemes, hierarchical surpluses, recombination."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from math import comb
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .grid import AnisoGrid, LevelIndex


@dataclass(frozen=True)
class SchemeEntry:
    level: LevelIndex
    coefficient: int
    layer: int


@dataclass
class CombinationScheme:
    d: int
    L: int
    L0: int
    entries: list[SchemeEntry]
    lower: tuple[float, ...] = None
    upper: tuple[float, ...] = None

    def __post_init__(self):
        if self.lower is None:
            self.lower = (0.0,) * self.d
        if self.upper is None:
            self.upper = (1.0,) * self.d
        self.lower = tuple(float(a) for a in self.lower)
        self.upper = tuple(float(b) for b in self.upper)
        levels = [e.level for e in self.entries]
        if len(set(levels)) != len(levels):
            raise ValueError("duplicate levels in combination scheme")

    @classmethod
    def single(cls, level, lower=None, upper=None) -> "CombinationScheme":
        """Degenerate scheme holding one full grid with coefficient one."""
        level = level if isinstance(level, LevelIndex) else LevelIndex(level)
        L = max(level)
        return cls(level.d, L, min(level), [SchemeEntry(level, 1, 0)], lower, upper)

    def __len__(self):
        return len(self.entries)

    @property
    def levels(self) -> list[LevelIndex]:
        return [e.level for e in self.entries]

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([e.coefficient for e in self.entries], dtype=float)

    @cached_property
    def grids(self) -> list[AnisoGrid]:
        return [AnisoGrid(e.level, self.lower, self.upper) for e in self.entries]

    def layer(self, level: LevelIndex) -> int:
        return self.L + (self.d - 1) - level.norm1()

    @cached_property
    def shared_nodes(self) -> "SharedNodeMap":
        return SharedNodeMap(self)

    def total_nodes(self) -> int:
        return sum(g.size for g in self.grids)


def _compositions(total: int, parts: int, minimum: int):
    """All tuples of ``parts`` integers >= minimum summing to ``total``, lexicographic."""
    if parts == 1:
        if total >= minimum:
            yield (total,)
        return
    for first in range(minimum, total - minimum * (parts - 1) + 1):
        for rest in _compositions(total - first, parts - 1, minimum):
            yield (first,) + rest


def build_scheme(d: int, L: int, L0: int = 1, lower=None, upper=None) -> CombinationScheme:
    """Enumerate the combination-technique subproblems for level ``L``.

    Every level ``l >= L0`` (component-wise) with ``|l|_1 = L + d - 1 - q`` for
    ``q = 0..d-1`` enters with coefficient ``(-1)**q * binom(d-1, q)``.
    Entries are sorted lexicographically by level.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if L0 < 1:
        raise ValueError(f"L0 must be >= 1, got {L0}")
    if L0 > L:
        raise ValueError(f"L0 must not exceed L (L0={L0}, L={L})")
    entries = []
    for q in range(d):
        coeff = (-1) ** q * comb(d - 1, q)
        for levels in _compositions(L + d - 1 - q, d, L0):
            entries.append(SchemeEntry(LevelIndex(levels), coeff, q))
    entries.sort(key=lambda e: e.level.levels)
    return CombinationScheme(d, L, L0, entries, lower, upper)


# -- hierarchical basis -------------------------------------------------------


def _hierarchize_axis(a: np.ndarray, level: int, inverse: bool) -> np.ndarray:
    n = (1 << level) - 1
    padded = np.zeros((n + 2,) + a.shape[1:])
    padded[1:-1] = a
    top = 1 << level
    levels = range(2, level + 1) if inverse else range(level, 1, -1)
    for lev in levels:
        s = 1 << (level - lev)
        node = slice(s, top, 2 * s)
        parents = 0.5 * (padded[0 : top - s : 2 * s] + padded[2 * s : top + 1 : 2 * s])
        if inverse:
            padded[node] += parents
        else:
            padded[node] -= parents
    return padded[1:-1]


def _transform(grid: AnisoGrid, values, inverse: bool) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.size,):
        raise ValueError(f"vector of length {values.shape} does not match grid with {grid.size} nodes")
    arr = grid.to_array(values)
    for j, lj in enumerate(grid.level):
        moved = np.moveaxis(arr, j, 0)
        arr = np.moveaxis(_hierarchize_axis(moved, lj, inverse), 0, j)
    return grid.from_array(arr)


def hierarchize(grid: AnisoGrid, values) -> np.ndarray:
    """Nodal values -> hierarchical surpluses (zero Dirichlet boundary).

    Applies the one-dimensional surplus transform along each dimension in turn.
    """
    return _transform(grid, values, inverse=False)


def dehierarchize(grid: AnisoGrid, surpluses) -> np.ndarray:
    """Hierarchical surpluses -> nodal values; inverse of :func:`hierarchize`."""
    return _transform(grid, surpluses, inverse=True)


# -- shared nodes and recombination -------------------------------------------


def dyadic_positions(grid: AnisoGrid, finest: int) -> np.ndarray:
    """Integer node positions on the common 2**finest lattice, shape (size, d)."""
    idx = grid.multi_index(np.arange(grid.size)).astype(np.int64)
    shifts = np.array([finest - lj for lj in grid.level], dtype=np.int64)
    return idx << shifts


def hierarchical_level(grid: AnisoGrid) -> np.ndarray:
    """Per-node hierarchical level vector, shape (size, d)."""
    idx = grid.multi_index(np.arange(grid.size)).astype(np.int64)
    trailing = np.zeros_like(idx)
    rest = idx.copy()
    while np.any(rest % 2 == 0):
        even = rest % 2 == 0
        trailing += even
        rest = np.where(even, rest // 2, rest)
    return np.array(grid.level.levels) - trailing


@dataclass
class SharedNodeMap:
    """Identifies nodes with identical coordinates across all grids of a scheme.

    ``keys[m][i]`` is the global id of node ``i`` of subproblem ``m``; nodes of
    different subproblems share an id exactly when their coordinates coincide.
    Matching is done on integer dyadic positions.
    """

    scheme: CombinationScheme
    keys: list[np.ndarray] = field(init=False)
    n_unique: int = field(init=False)

    def __post_init__(self):
        grids = self.scheme.grids
        finest = max(max(g.level) for g in grids)
        positions = [dyadic_positions(g, finest) for g in grids]
        stacked = np.concatenate(positions, axis=0)
        _, inverse = np.unique(stacked, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        self.n_unique = int(inverse.max()) + 1 if inverse.size else 0
        offsets = np.cumsum([0] + [g.size for g in grids])
        self.keys = [inverse[offsets[m] : offsets[m + 1]] for m in range(len(grids))]
        self._offsets = offsets

    def members(self, sub: int, node: int) -> list[tuple[int, int]]:
        """All (subproblem, node) pairs located at the coordinate of ``node`` on ``sub``."""
        key = self.keys[sub][node]
        out = []
        for m, k in enumerate(self.keys):
            hits = np.flatnonzero(k == key)
            out.extend((m, int(j)) for j in hits)
        return out

    def combine_surpluses(self, surpluses: Sequence[np.ndarray]) -> list[np.ndarray]:
        coeffs = self.scheme.coefficients
        weighted = np.concatenate([c * w for c, w in zip(coeffs, surpluses)])
        gathered = np.bincount(np.concatenate(self.keys), weights=weighted, minlength=self.n_unique)
        return [gathered[k] for k in self.keys]


def _check_states(scheme: CombinationScheme, states: Sequence[np.ndarray]):
    if len(states) != len(scheme):
        raise ValueError(f"expected {len(scheme)} subproblem states, got {len(states)}")
    for g, s in zip(scheme.grids, states):
        if np.shape(s) != (g.size,):
            raise ValueError(f"state of shape {np.shape(s)} does not match grid {g.level}")


def recombine(scheme: CombinationScheme, states: Sequence[np.ndarray], pmap=map) -> list[np.ndarray]:
    """Combine all subproblem solutions and project the result back onto each grid.

    Equivalent to forming the combined function and interpolating it on every
    subproblem grid, but done on hierarchical surpluses.
    """
    _check_states(scheme, states)
    grids = scheme.grids
    surpluses = list(pmap(hierarchize, grids, states))
    combined = scheme.shared_nodes.combine_surpluses(surpluses)
    return list(pmap(dehierarchize, grids, combined))


def interpolate(scheme: CombinationScheme, func) -> list[np.ndarray]:
    """Nodal interpolants of ``func`` on every subproblem grid."""
    return [g.sample(func) for g in scheme.grids]


def interpolant(grid: AnisoGrid, values) -> RegularGridInterpolator:
    """Piecewise d-linear interpolant including the zero boundary layer."""
    axes = []
    for j in range(grid.d):
        axes.append(np.concatenate([[grid.lower[j]], grid.axis(j), [grid.upper[j]]]))
    padded = np.pad(grid.to_array(values), 1)
    return RegularGridInterpolator(axes, padded, method="linear", bounds_error=True)


def evaluate_combined(scheme: CombinationScheme, states: Sequence[np.ndarray], x) -> np.ndarray | float:
    """Value of the combined solution ``sum_l c_l u_l(x)`` at point(s) ``x``."""
    _check_states(scheme, states)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != scheme.d:
        raise ValueError(f"points must have {scheme.d} coordinates")
    lo, hi = np.asarray(scheme.lower), np.asarray(scheme.upper)
    if np.any(pts < lo) or np.any(pts > hi):
        raise ValueError("evaluation point outside the domain")
    total = np.zeros(len(pts))
    for e, g, s in zip(scheme.entries, scheme.grids, states):
        total += e.coefficient * interpolant(g, s)(pts)
    return float(total[0]) if single else total


def point_weights(grid: AnisoGrid, x) -> tuple[np.ndarray, np.ndarray]:
    """Node indices and d-linear weights reproducing ``interpolant(grid, v)(x)``.

    Corners on the boundary carry the implicit zero value and are dropped.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (grid.d,) or not grid.contains(x):
        raise ValueError("point must lie inside the grid box")
    s = (x - np.asarray(grid.lower)) / grid.h
    top = np.array([1 << lj for lj in grid.level])
    base = np.minimum(np.floor(s).astype(np.int64), top - 1)
    frac = s - base
    idx, wts = [], []
    for corner in np.ndindex(*(2,) * grid.d):
        c = np.array(corner)
        node = base + c
        w = float(np.prod(np.where(c == 1, frac, 1.0 - frac)))
        if w == 0.0 or np.any(node <= 0) or np.any(node >= top):
            continue
        idx.append(int(grid.linear_index(node)))
        wts.append(w)
    return np.array(idx, dtype=np.int64), np.array(wts)
