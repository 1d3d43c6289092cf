import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hilbert_oracle import apply_symmetry, curve, hypercube_symmetries
from ctmgrit.grid import AnisoGrid, LevelIndex
from ctmgrit.sfc import (
    HilbertOrder,
    choose_subdomain_count,
    disjoint_sizes,
    hilbert_decode,
    hilbert_encode,
    hilbert_rank,
    overlap_weight,
    partition,
)


def test_encode_order2_matches_recursive_oracle():
    pts = np.array(curve(2, 2))
    assert np.array_equal(hilbert_decode(np.arange(16), 2, 2), pts)
    assert np.array_equal(hilbert_encode(pts, 2), np.arange(16))
    # canonical U-shaped first level: quadrants (0,0) (0,1) (1,1) (1,0) up to symmetry
    quadrants = [tuple(p) for p in (pts[::4] // 2)]
    assert len(set(quadrants)) == 4


@pytest.mark.parametrize("d,order", [(2, 1), (2, 3), (2, 5), (3, 2), (3, 4), (4, 1), (4, 3)])
def test_curve_equals_oracle_and_is_adjacent(d, order):
    pts = hilbert_decode(np.arange(1 << (d * order)), d, order)
    oracle = np.array(curve(d, order))
    assert np.array_equal(pts, oracle)
    assert np.array_equal(hilbert_encode(oracle, order), np.arange(len(oracle)))
    steps = np.abs(np.diff(pts, axis=0))
    assert np.all(steps.sum(axis=1) == 1)


def test_oracle_symmetry_helper_preserves_adjacency():
    pts = np.array(curve(3, 2))
    for perm, flips in list(hypercube_symmetries(3))[:6]:
        q = apply_symmetry(pts, 2, perm, flips)
        assert np.all(np.abs(np.diff(q, axis=0)).sum(axis=1) == 1)


def test_encode_rejects_out_of_range():
    with pytest.raises(ValueError):
        hilbert_encode([[4, 0]], 2)
    with pytest.raises(ValueError):
        hilbert_decode([16], 2, 2)


def test_rank_isotropic_is_permutation_of_virtual_indices():
    level = LevelIndex((2, 2))
    g = AnisoGrid(level)
    mi = g.multi_index(np.arange(g.size))
    ranks = hilbert_rank(level, mi)
    assert len(set(ranks.tolist())) == 9
    assert sorted(ranks) == sorted(hilbert_encode(mi, 2))


def test_rank_1d_is_coordinate_order():
    g = AnisoGrid(LevelIndex((5,)))
    order = HilbertOrder.of(g)
    assert np.array_equal(order.curve, np.arange(g.size))


def test_rank_rejects_boundary_nodes():
    with pytest.raises(ValueError):
        hilbert_rank((2, 2), [[0, 1]])
    with pytest.raises(ValueError):
        hilbert_rank((2, 2), [[1, 4]])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=2, max_size=3).map(tuple))
def test_anisotropic_order_is_bijection_and_follows_curve(level):
    g = AnisoGrid(LevelIndex(level))
    order = HilbertOrder.of(g)
    assert np.array_equal(np.sort(order.curve), np.arange(g.size))
    keys = hilbert_rank(level, g.multi_index(order.curve))
    assert np.all(np.diff(keys) > 0)


def test_disjoint_sizes_example():
    assert disjoint_sizes(10, 3).tolist() == [3, 3, 4]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(1, 50))
def test_disjoint_sizes_formula(n, P):
    P = min(P, n)
    sizes = disjoint_sizes(n, P)
    assert sizes.sum() == n and len(sizes) == P
    assert sizes.max() - sizes.min() <= 1
    assert np.sum(sizes == n // P) == P - (n - P * (n // P))


def test_partition_union_and_disjointness():
    g = AnisoGrid(LevelIndex((4, 5)))
    dec = partition(g, 7, 0.5, 2)
    allnodes = np.concatenate(dec.disjoint)
    assert np.array_equal(np.sort(allnodes), np.arange(g.size))
    for dj, ext in zip(dec.disjoint, dec.extended):
        assert set(dj) <= set(ext)


def test_partition_gamma_half_interior_size():
    g = AnisoGrid(LevelIndex((6,)))  # 63 nodes -> seven pieces of 6, three of 7
    dec = partition(g, 10, 0.5, 1)
    for i in range(1, 6):
        assert dec.disjoint[i].size == 6
        assert dec.extended[i].size == 2 * 6


def test_partition_odd_pieces_round_slices_up():
    dec = partition(AnisoGrid(LevelIndex((4, 4))), 15, 0.5, 1)  # pieces of 15, slices of 8
    assert all(dec.extended[i].size == 15 + 2 * 8 for i in range(1, 14))
    assert dec.extended[0].size == 15 + 8


def test_partition_gamma_zero_is_block_jacobi():
    g = AnisoGrid(LevelIndex((3, 4)))
    dec = partition(g, 6, 0.0, 1)
    for dj, ext in zip(dec.disjoint, dec.extended):
        assert np.array_equal(dj, ext)
    assert np.all(dec.weights == 1.0)


@pytest.mark.parametrize("n_half", [2, 4])
def test_partition_coverage_wrapped(n_half):
    # integer gamma keeps the slices whole for the odd piece sizes of interior grids
    g = AnisoGrid(LevelIndex((4, 4)))  # 225 = 15 * 15
    dec = partition(g, 15, n_half / 2, 1, wrap=True)
    assert np.all(dec.multiplicity == n_half + 1)


@pytest.mark.parametrize("n_half", [2, 4])
def test_partition_coverage_truncated(n_half):
    g = AnisoGrid(LevelIndex((4, 4)))
    dec = partition(g, 15, n_half / 2, 1)
    rank = dec.order.rank
    depth = n_half // 2 * 15
    far = (rank >= n_half * depth) & (rank < g.size - n_half * depth)
    assert np.all(dec.multiplicity[far] == n_half + 1)
    assert dec.multiplicity.min() >= 1


def test_partition_errors():
    g = AnisoGrid(LevelIndex((2, 2)))
    with pytest.raises(ValueError):
        partition(g, 10, 0.5, 1)
    with pytest.raises(ValueError):
        partition(g, 3, 0.5, 4)
    with pytest.raises(ValueError):
        partition(g, 0, 0.5, 1)


def test_coarse_restriction_chunks():
    g = AnisoGrid(LevelIndex((4,)))
    dec = partition(g, 2, 0.5, 2)
    Z = dec.coarse_restriction().toarray()
    assert Z.shape == (4, 15)
    # every node of a disjoint piece lies in exactly one chunk of its subdomain
    assert np.array_equal(Z.sum(axis=0), np.ones(15))
    assert np.linalg.matrix_rank(Z) == 4
    assert np.allclose(Z, (dec.chunk_sum_matrix() @ dec.stacked_injection()).toarray())


@pytest.mark.parametrize("level, S, expected", [((1, 11), 10, 2), ((6, 6), 10, 4), ((7, 7), 10, 16)])
def test_choose_subdomain_count(level, S, expected):
    assert choose_subdomain_count(level, S) == expected


def test_choose_subdomain_count_degenerate_warns():
    with pytest.warns(UserWarning):
        assert choose_subdomain_count((5, 5), 10) == 1


@pytest.mark.parametrize("gamma, w", [(0.5, 0.5), (0.0, 1.0), (1.0, 1 / 3), (1.5, 0.25)])
def test_overlap_weight(gamma, w):
    assert overlap_weight(gamma) == pytest.approx(w)


def test_overlap_weight_general_rule():
    g = AnisoGrid(LevelIndex((4, 4)))
    dec = partition(g, 8, 0.3, 1)
    assert overlap_weight(0.3, dec) == pytest.approx(1.0 / dec.multiplicity.max())
    with pytest.raises(ValueError):
        overlap_weight(0.3)


def test_partition_half_overlap_coverage_bounds():
    dec = partition(AnisoGrid(LevelIndex((4, 4))), 15, 0.5, 1, wrap=True)
    assert dec.multiplicity.min() == 2 and dec.multiplicity.max() == 3


def test_partition_of_unity_interior():
    g = AnisoGrid(LevelIndex((4, 4)))
    dec = partition(g, 15, 1.0, 1, wrap=True)
    assert np.allclose(dec.weights, overlap_weight(1.0))
    total = np.zeros(g.size)
    for w, ext in zip(dec.weights, dec.extended):
        total[ext] += w
    assert np.allclose(total, 1.0)
