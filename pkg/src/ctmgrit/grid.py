"""Anisotropic tensor-product grids of interior nodes on axis-aligned boxes.

Nodes are stored lexicographically with dimension 1 running fastest. Only
interior nodes are represented; homogeneous Dirichlet values are implicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True, order=True)
class LevelIndex:
    levels: tuple[int, ...]

    def __init__(self, levels: Sequence[int] | int):
        if isinstance(levels, (int, np.integer)):
            levels = (int(levels),)
        levels = tuple(int(v) for v in levels)
        if len(levels) < 1:
            raise ValueError("level index needs at least one dimension")
        if any(v < 1 for v in levels):
            raise ValueError(f"all levels must be >= 1, got {levels}")
        object.__setattr__(self, "levels", levels)

    @property
    def d(self) -> int:
        return len(self.levels)

    def norm1(self) -> int:
        return sum(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, j):
        return self.levels[j]

    def __str__(self):
        return "(" + ",".join(str(v) for v in self.levels) + ")"


def interior_count(level: LevelIndex | Sequence[int]) -> int:
    """Number of interior nodes, prod_j (2**l_j - 1)."""
    level = level if isinstance(level, LevelIndex) else LevelIndex(level)
    n = 1
    for lj in level:
        n *= (1 << lj) - 1
    return n


@dataclass(frozen=True)
class AnisoGrid:
    level: LevelIndex
    lower: tuple[float, ...] = field(default=None)
    upper: tuple[float, ...] = field(default=None)

    def __post_init__(self):
        level = self.level if isinstance(self.level, LevelIndex) else LevelIndex(self.level)
        object.__setattr__(self, "level", level)
        d = level.d
        lower = (0.0,) * d if self.lower is None else tuple(float(a) for a in self.lower)
        upper = (1.0,) * d if self.upper is None else tuple(float(b) for b in self.upper)
        if len(lower) != d or len(upper) != d:
            raise ValueError("box bounds must match the grid dimension")
        if any(b <= a for a, b in zip(lower, upper)):
            raise ValueError(f"degenerate box {lower} x {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def d(self) -> int:
        return self.level.d

    @property
    def shape(self) -> tuple[int, ...]:
        """Interior nodes per dimension (dimension 1 first)."""
        return tuple((1 << lj) - 1 for lj in self.level)

    @property
    def size(self) -> int:
        return interior_count(self.level)

    @property
    def h(self) -> np.ndarray:
        return np.array([(b - a) / (1 << lj) for a, b, lj in zip(self.lower, self.upper, self.level)])

    def axis(self, j: int) -> np.ndarray:
        """Interior node coordinates along dimension ``j``."""
        n = (1 << self.level[j]) - 1
        return self.lower[j] + np.arange(1, n + 1) * self.h[j]

    def multi_index(self, linear_index) -> np.ndarray:
        """1-based node multi-indices for linear indices (scalar or array)."""
        k = np.asarray(linear_index)
        if np.any(k < 0) or np.any(k >= self.size):
            raise IndexError(f"linear index out of range [0, {self.size})")
        idx = np.unravel_index(k, self.shape, order="F")
        return np.stack(idx, axis=-1) + 1

    def linear_index(self, multi_index) -> np.ndarray:
        i = np.asarray(multi_index) - 1
        shape = self.shape
        if np.any(i < 0) or np.any(i >= np.array(shape)):
            raise IndexError("node multi-index out of range")
        return np.ravel_multi_index(tuple(np.moveaxis(i, -1, 0)), shape, order="F")

    def node_coordinate(self, linear_index) -> np.ndarray:
        return np.asarray(self.lower) + self.multi_index(linear_index) * self.h

    def coordinate_index(self, x) -> np.ndarray:
        """Inverse of :meth:`node_coordinate` for points lying on nodes."""
        x = np.asarray(x, dtype=float)
        i = np.rint((x - np.asarray(self.lower)) / self.h).astype(np.int64)
        return self.linear_index(i)

    @cached_property
    def coordinates(self) -> np.ndarray:
        """All node coordinates, shape (size, d), in storage order."""
        return self.node_coordinate(np.arange(self.size))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= np.asarray(self.lower)) and np.all(x <= np.asarray(self.upper)))

    def to_array(self, values) -> np.ndarray:
        """View a flat vector as a d-dimensional array indexed [i_1, ..., i_d]."""
        return np.asarray(values).reshape(self.shape, order="F")

    @staticmethod
    def from_array(array) -> np.ndarray:
        return np.asarray(array).reshape(-1, order="F")

    def sample(self, func) -> np.ndarray:
        """Evaluate ``func`` on all nodes; ``func`` maps (n, d) points to (n,)."""
        return np.asarray(func(self.coordinates), dtype=float).reshape(self.size)


# -- finite-difference building blocks ---------------------------------------


def second_difference(n: int, h: float) -> sp.csr_matrix:
    """Three-point second derivative on ``n`` interior nodes, zero Dirichlet."""
    e = np.ones(n)
    return sp.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1], format="csr") / h**2


def central_difference(n: int, h: float) -> sp.csr_matrix:
    """Central first derivative on ``n`` interior nodes, zero Dirichlet."""
    e = np.ones(n - 1)
    return sp.diags([-e, e], [-1, 1], shape=(n, n), format="csr") / (2 * h)


def kron_axis(grid: AnisoGrid, mats: dict[int, sp.spmatrix]) -> sp.csr_matrix:
    """Tensor product placing ``mats[j]`` on dimension ``j`` and identity elsewhere.

    With dimension 1 running fastest the Kronecker factors appear in reverse
    dimension order.
    """
    out = None
    for j in reversed(range(grid.d)):
        m = mats.get(j)
        if m is None:
            m = sp.identity(grid.shape[j], format="csr")
        out = m if out is None else sp.kron(out, m, format="csr")
    return out.tocsr()


def negative_laplacian(grid: AnisoGrid) -> sp.csr_matrix:
    h = grid.h
    terms = [kron_axis(grid, {j: -second_difference(grid.shape[j], h[j])}) for j in range(grid.d)]
    return sum(terms[1:], terms[0]).tocsr()


def shift_operator(op: sp.spmatrix, dt: float) -> sp.csr_matrix:
    """Backward-Euler system matrix ``op + I/dt``."""
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    n = op.shape[0]
    return (sp.csr_matrix(op) + sp.identity(n, format="csr") / dt).tocsr()
