"""Hilbert-curve ordering of anisotropic grids and overlapping subdomain partitions."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from math import ceil

import numpy as np
import scipy.sparse as sp

from .grid import AnisoGrid, LevelIndex, interior_count

log = logging.getLogger(__name__)


# -- d-dimensional Hilbert curve ------------------------------------------------
#
# Gray-code base pattern; each sub-cube is entered at e(w) and traversed along
# direction d(w), tracked per point as a (entry, direction) frame.


def _check_bits(d: int, order: int):
    if d * order > 63:
        raise ValueError(f"Hilbert index needs {d * order} bits; at most 63 supported")


def _frame_tables(d: int):
    """Entry corner and direction increment for every sub-cube label."""
    w = np.arange(1 << d)
    gray = lambda i: i ^ (i >> 1)
    entry = np.where(w == 0, 0, gray(2 * ((w - 1) // 2)))

    def trailing_ones(i):
        n = 0
        while i & 1:
            n, i = n + 1, i >> 1
        return n

    direction = np.array(
        [0 if i == 0 else (trailing_ones(i - 1) if i % 2 == 0 else trailing_ones(i)) % d for i in w]
    )
    return entry.astype(np.int64), direction.astype(np.int64)


def _rotl(x, r, d):
    mask = (1 << d) - 1
    return ((x << r) | (x >> (d - r))) & mask


def _rotr(x, r, d):
    mask = (1 << d) - 1
    return ((x >> r) | (x << (d - r))) & mask


def _gray_inverse(g, d):
    w = g.copy()
    shift = 1
    while shift < d:
        w ^= w >> shift
        shift <<= 1
    return w


def hilbert_encode(coords, order: int) -> np.ndarray:
    """Curve index of integer points in [0, 2**order)^d, shape (n, d) -> (n,)."""
    p = np.array(coords, dtype=np.int64, ndmin=2)
    n, d = p.shape
    _check_bits(d, order)
    if np.any(p < 0) or np.any(p >= (1 << order)):
        raise ValueError("coordinates outside the curve lattice")
    entry_tab, dir_tab = _frame_tables(d)
    e = np.zeros(n, dtype=np.int64)
    r = np.zeros(n, dtype=np.int64)
    h = np.zeros(n, dtype=np.int64)
    for i in range(order - 1, -1, -1):
        label = np.zeros(n, dtype=np.int64)
        for j in range(d):
            label |= ((p[:, j] >> i) & 1) << j
        w = _gray_inverse(_rotr(label ^ e, (r + 1) % d, d), d)
        e = e ^ _rotl(entry_tab[w], (r + 1) % d, d)
        r = (r + dir_tab[w] + 1) % d
        h = (h << d) | w
    return h


def hilbert_decode(index, d: int, order: int) -> np.ndarray:
    """Inverse of :func:`hilbert_encode`; returns integer points of shape (n, d)."""
    _check_bits(d, order)
    h = np.array(index, dtype=np.int64, ndmin=1)
    if np.any(h < 0) or np.any(h >= (1 << (d * order))):
        raise ValueError("curve index out of range")
    n = h.size
    entry_tab, dir_tab = _frame_tables(d)
    e = np.zeros(n, dtype=np.int64)
    r = np.zeros(n, dtype=np.int64)
    p = np.zeros((n, d), dtype=np.int64)
    mask = (1 << d) - 1
    for i in range(order - 1, -1, -1):
        w = (h >> (i * d)) & mask
        label = _rotl(w ^ (w >> 1), (r + 1) % d, d) ^ e
        for j in range(d):
            p[:, j] |= ((label >> j) & 1) << i
        e = e ^ _rotl(entry_tab[w], (r + 1) % d, d)
        r = (r + dir_tab[w] + 1) % d
    return p


def virtual_positions(level: LevelIndex, multi_index) -> np.ndarray:
    """Place anisotropic nodes on the isotropic 2**l_max lattice.

    Coarser dimensions are stretched by 2**(l_max - l_j); the skipped lattice
    points act as virtual nodes that only offset the curve enumeration.
    """
    i = np.asarray(multi_index, dtype=np.int64)
    lmax = max(level)
    shifts = np.array([lmax - lj for lj in level], dtype=np.int64)
    return i << shifts


def hilbert_rank(level: LevelIndex | tuple, multi_index) -> np.ndarray:
    """Hilbert index of (1-based) interior node multi-indices of grid ``level``."""
    level = level if isinstance(level, LevelIndex) else LevelIndex(level)
    i = np.array(multi_index, dtype=np.int64, ndmin=2)
    upper = np.array([(1 << lj) - 1 for lj in level])
    if i.shape[1] != level.d or np.any(i < 1) or np.any(i > upper):
        raise ValueError("node is not an interior node of the grid")
    return hilbert_encode(virtual_positions(level, i), max(level))


@dataclass(frozen=True)
class HilbertOrder:
    grid: AnisoGrid
    curve: np.ndarray  # linear node indices in curve order
    rank: np.ndarray  # rank[k] = position of node k along the curve

    @classmethod
    def of(cls, grid: AnisoGrid) -> "HilbertOrder":
        idx = grid.multi_index(np.arange(grid.size))
        keys = hilbert_rank(grid.level, idx.reshape(-1, grid.d))
        curve = np.argsort(keys, kind="stable")
        rank = np.empty_like(curve)
        rank[curve] = np.arange(curve.size)
        return cls(grid, curve, rank)


# -- subdomain partition --------------------------------------------------------


def disjoint_sizes(n: int, P: int) -> np.ndarray:
    """P - r pieces of size n // P followed by r pieces of size n // P + 1."""
    base, r = divmod(n, P)
    return np.array([base] * (P - r) + [base + 1] * r, dtype=np.int64)


def chunk_sizes(n: int, q: int) -> np.ndarray:
    """Split ``n`` into ``q`` chunks; the first ``n % q`` get one extra element."""
    base, r = divmod(n, q)
    return np.array([base + 1] * r + [base] * (q - r), dtype=np.int64)


@dataclass
class SfcDecomposition:
    order: HilbertOrder
    P: int
    gamma: float
    q: int
    disjoint: list[np.ndarray]
    extended: list[np.ndarray]
    coarse_chunks: list[np.ndarray]  # per subdomain: chunk id of every extended dof, -1 on the overlap
    wrap: bool = False
    multiplicity: np.ndarray = field(default=None)
    weights: np.ndarray = field(default=None)

    @property
    def grid(self) -> AnisoGrid:
        return self.order.grid

    @property
    def n_coarse(self) -> int:
        return self.P * self.q

    def coarse_restriction(self) -> sp.csr_matrix:
        """Agglomeration map from the global node space, shape (P*q, n).

        Row ``i*q + j`` sums the dofs of the j-th curve chunk of the disjoint
        piece of subdomain ``i``; chunks have about ``|piece_i| / q`` nodes.
        Equals the block-diagonal chunk-sum matrix applied after the stacked
        subdomain injections.
        """
        rows, cols = [], []
        for i, (ext, chunks) in enumerate(zip(self.extended, self.coarse_chunks)):
            keep = chunks >= 0
            rows.append(i * self.q + chunks[keep])
            cols.append(ext[keep])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        Z = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_coarse, self.grid.size))
        return Z.tocsr()

    def stacked_injection(self) -> sp.csr_matrix:
        """All subdomain injections stacked, shape (sum |ext_i|, n)."""
        cols = np.concatenate(self.extended)
        rows = np.arange(cols.size)
        return sp.csr_matrix((np.ones(cols.size), (rows, cols)), shape=(cols.size, self.grid.size))

    def chunk_sum_matrix(self) -> sp.csr_matrix:
        """Block-diagonal per-subdomain chunk sums, shape (P*q, sum |ext_i|)."""
        blocks = []
        for chunks in self.coarse_chunks:
            m = chunks.size
            cols = np.flatnonzero(chunks >= 0)
            blocks.append(sp.csr_matrix((np.ones(cols.size), (chunks[cols], cols)), shape=(self.q, m)))
        return sp.block_diag(blocks, format="csr")


def partition(grid: AnisoGrid, P: int, gamma: float = 0.5, q: int = 1, wrap: bool = False) -> SfcDecomposition:
    """Cut the Hilbert-ordered nodes of ``grid`` into ``P`` overlapping subdomains.

    Disjoint pieces are contiguous curve ranges. Subdomain ``i`` is extended
    by ``ceil(gamma * |piece_i|)`` curve positions on both sides; positions
    beyond the curve ends are dropped unless ``wrap`` is set, in which case
    the curve is treated as closed.
    """
    n = grid.size
    if not 1 <= P <= n:
        raise ValueError(f"number of subdomains P={P} must lie in [1, {n}]")
    if gamma < 0:
        raise ValueError(f"overlap gamma must be >= 0, got {gamma}")
    order = HilbertOrder.of(grid)
    sizes = disjoint_sizes(n, P)
    if not 1 <= q <= sizes.min():
        raise ValueError(f"coarse dofs per subdomain q={q} must lie in [1, {sizes.min()}]")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    disjoint, extended, chunks = [], [], []
    for s, m in zip(starts, sizes):
        disjoint.append(order.curve[s : s + m])
        depth = ceil(Fraction(str(gamma)) * m) if P > 1 else 0
        positions = np.arange(s - depth, s + m + depth)
        if wrap:
            positions = np.unique(positions % n)
            # keep curve order starting from the leftmost overlap slice
            positions = np.roll(positions, -np.searchsorted(positions, (s - depth) % n))
        else:
            positions = positions[(positions >= 0) & (positions < n)]
        ext = order.curve[positions]
        extended.append(ext)
        owned = np.full(ext.size, -1, dtype=np.int64)
        inside = np.flatnonzero((positions >= s) & (positions < s + m))
        owned[inside] = np.repeat(np.arange(q), chunk_sizes(m, q))
        chunks.append(owned)
    multiplicity = np.zeros(n, dtype=np.int64)
    for ext in extended:
        multiplicity[ext] += 1
    # omega_i = 1 / (max number of extended subdomains covering a node of piece i)
    weights = np.array([1.0 / multiplicity[dj].max() for dj in disjoint])
    return SfcDecomposition(order, P, float(gamma), q, disjoint, extended, chunks, wrap, multiplicity, weights)


def choose_subdomain_count(level: LevelIndex | tuple, S: int) -> int:
    """Subdomain count giving pieces of about 2**S nodes: ceil(|grid| / 2**S)."""
    n = interior_count(level)
    if (1 << S) > n:
        warnings.warn(f"target subdomain size 2**{S} exceeds grid size {n}; using one subdomain", stacklevel=2)
        return 1
    return -(-n // (1 << S))


def overlap_weight(gamma: float, decomposition: SfcDecomposition | None = None) -> float:
    """Uniform partition-of-unity weight 1/(n+1) for gamma = n/2.

    For other overlaps the weight is taken from ``decomposition`` as the
    inverse of the largest node multiplicity.
    """
    twice = Fraction(str(gamma)) * 2
    if twice.denominator == 1 and twice >= 0:
        return 1.0 / (int(twice) + 1)
    if decomposition is None:
        raise ValueError(f"gamma={gamma} is not a half-integer; a decomposition is required")
    return 1.0 / int(decomposition.multiplicity.max())
