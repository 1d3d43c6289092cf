import numpy as np
import pytest
import scipy.sparse as sp

from ctmgrit.dd import (
    SchwarzPreconditioner,
    ShiftedSolver,
    SpatialSolverError,
    bicgstab,
    is_symmetric,
    pcg,
)
from ctmgrit.grid import AnisoGrid, LevelIndex, negative_laplacian, shift_operator
from ctmgrit.problems import LinearSdeProblem, assemble_fokker_planck_operator
from ctmgrit.sfc import partition

# frozen on the first verified run: 1D Laplacian l=(10), P=8, gamma=1/2, q=8, balanced, tol 1e-8
PCG_BALANCED_L10_ITERATIONS = 11


def laplace_1d(level):
    g = AnisoGrid(LevelIndex((level,)))
    return g, negative_laplacian(g)


def test_one_level_single_subdomain_is_exact(rng):
    g, A = laplace_1d(5)
    M = SchwarzPreconditioner(A, partition(g, 1, 0.0, 1), "one_level")
    r = rng.standard_normal(g.size)
    assert np.allclose(A @ M(r), r)


def test_one_level_identity_partition_of_unity(rng):
    g = AnisoGrid(LevelIndex((4, 4)))
    dec = partition(g, 15, 1.0, 1, wrap=True)
    M = SchwarzPreconditioner(sp.eye(g.size), dec, "one_level")
    r = rng.standard_normal(g.size)
    assert np.allclose(M(r), r)


@pytest.mark.parametrize("variant", ["one_level", "additive", "balanced"])
def test_preconditioner_symmetry(variant, rng):
    g, A = laplace_1d(6)
    M = SchwarzPreconditioner(shift_operator(A, 1e-2), partition(g, 4, 0.5, 2), variant)
    C = M.matrix()
    assert np.abs(C - C.T).max() <= 1e-12 * np.abs(C).max()
    x, y = rng.standard_normal(g.size), rng.standard_normal(g.size)
    assert abs(M(x) @ y - x @ M(y)) <= 1e-12 * np.abs(C).max() * g.size


def test_preconditioner_symmetry_2d():
    g = AnisoGrid(LevelIndex((4, 5)))
    A = shift_operator(negative_laplacian(g), 1e-3)
    C = SchwarzPreconditioner(A, partition(g, 6, 0.5, 3), "balanced").matrix()
    assert np.abs(C - C.T).max() <= 1e-12 * np.abs(C).max()


def test_coarse_identity_constant_vector():
    g = AnisoGrid(LevelIndex((3, 3)))
    dec = partition(g, 7, 0.0, 1)
    M = SchwarzPreconditioner(sp.eye(g.size), dec, "additive")
    out = M.apply_coarse(np.ones(g.size))
    Z = dec.coarse_restriction().toarray()
    oracle = Z.T @ np.linalg.solve(Z @ Z.T, Z @ np.ones(g.size))
    assert np.allclose(out, oracle)
    assert np.allclose(out, 1.0)


def test_coarse_zero_residual():
    g, A = laplace_1d(4)
    M = SchwarzPreconditioner(A, partition(g, 2, 0.5, 2), "additive")
    assert np.array_equal(M.apply_coarse(np.zeros(g.size)), np.zeros(g.size))


def test_coarse_matrix_triple_product():
    g, A = laplace_1d(4)
    dec = partition(g, 2, 0.5, 2)
    M = SchwarzPreconditioner(A, dec, "additive")
    R = dec.stacked_injection().toarray()
    R0 = dec.chunk_sum_matrix().toarray()
    A_stacked = R @ A.toarray() @ R.T
    assert M.coarse_matrix.shape == (4, 4)
    assert np.allclose(M.coarse_matrix.toarray(), R0 @ A_stacked @ R0.T)


def test_balanced_with_exact_coarse_space(rng):
    g, A = laplace_1d(4)
    dec = partition(g, 15, 0.0, 1)  # one node per subdomain: coarse space = full space
    M = SchwarzPreconditioner(A, dec, "balanced")
    r = rng.standard_normal(g.size)
    assert np.allclose(M(r), np.linalg.solve(A.toarray(), r))


def test_balanced_not_worse_than_additive():
    g, A = laplace_1d(8)
    b = np.random.default_rng(1).standard_normal(g.size)
    dec = partition(g, 8, 0.5, 4)
    its = {v: pcg(A, b, SchwarzPreconditioner(A, dec, v), 1e-8)[1].iterations for v in ("additive", "balanced")}
    assert its["balanced"] <= its["additive"]


def test_pcg_identity_and_zero_rhs(rng):
    I = sp.eye(20)
    b = rng.standard_normal(20)
    x, rep = pcg(I, b, tol=1e-12)
    assert rep.converged and rep.iterations == 1 and np.allclose(x, b)
    x, rep = pcg(I, np.zeros(20))
    assert rep.iterations == 0 and np.all(x == 0)


def test_pcg_regression_baseline():
    g, A = laplace_1d(10)
    b = np.random.default_rng(0).standard_normal(g.size)
    x, rep = pcg(A, b, SchwarzPreconditioner(A, partition(g, 8, 0.5, 8), "balanced"), tol=1e-8)
    assert rep.converged
    assert np.linalg.norm(b - A @ x) <= 1e-8
    assert rep.iterations <= PCG_BALANCED_L10_ITERATIONS


def test_pcg_reports_maxit_and_breakdown(rng):
    g, A = laplace_1d(6)
    b = rng.standard_normal(g.size)
    _, rep = pcg(A, b, tol=1e-14, maxit=2)
    assert not rep.converged and rep.breakdown is None and rep.iterations == 2
    _, rep = pcg(-A, b, tol=1e-10)
    assert not rep.converged and rep.breakdown is not None


def test_bicgstab_identity_and_spd_agreement(rng):
    b = rng.standard_normal(10)
    x, rep = bicgstab(sp.eye(10), b, tol=1e-12)
    assert rep.converged and rep.iterations == 1 and np.allclose(x, b)
    g, A = laplace_1d(7)
    A = shift_operator(A, 1e-3)
    b = rng.standard_normal(g.size)
    M = SchwarzPreconditioner(A, partition(g, 4, 0.5, 2), "additive")
    xc, rc = pcg(A, b, M, tol=1e-10)
    xb, rb = bicgstab(A, b, M, tol=1e-10)
    assert rc.converged and rb.converged
    assert np.abs(xc - xb).max() <= 1e-7


def test_bicgstab_fokker_planck_operator(rng):
    p = LinearSdeProblem.oscillator()
    g = AnisoGrid(LevelIndex((6, 5)), p.lower, p.upper)
    A = shift_operator(assemble_fokker_planck_operator(g, p), 0.01)
    assert not is_symmetric(A)
    b = rng.standard_normal(g.size)
    M = SchwarzPreconditioner(A, partition(g, 4, 0.5, 4), "additive")
    x, rep = bicgstab(A, b, M, tol=1e-8)
    assert rep.converged
    assert np.linalg.norm(b - A @ x) <= 1e-8


def test_preconditioned_matches_unpreconditioned(rng):
    g, A = laplace_1d(6)
    b = rng.standard_normal(g.size)
    tol = 1e-9
    x1, _ = pcg(A, b, tol=tol)
    x2, _ = pcg(A, b, SchwarzPreconditioner(A, partition(g, 4, 0.5, 2), "balanced"), tol=tol)
    # solution difference bounded through the inverse: |A^-1| * 2 tol
    bound = np.linalg.norm(np.linalg.inv(A.toarray()), 2) * 2 * tol
    assert np.linalg.norm(x1 - x2) <= 10 * bound


def test_shifted_solver_direct_and_dd_agree(rng):
    g = AnisoGrid(LevelIndex((5, 5)))
    A = negative_laplacian(g)
    b = rng.standard_normal(g.size)
    direct = ShiftedSolver(A, "direct")
    dd = ShiftedSolver(A, "dd", partition(g, 4, 0.5, 4), tol=1e-11)
    assert dd.variant == "balanced"
    x1, x2 = direct.solve(0.01, b), dd.solve(0.01, b)
    assert np.abs(x1 - x2).max() <= 1e-9
    dd.solve(0.01, b, x0=x2)
    dd.solve(0.02, b)
    assert len(dd._cache) == 2 and dd.stats.solves == 3


def test_shifted_solver_failure_raises(rng):
    g = AnisoGrid(LevelIndex((5, 5)))
    solver = ShiftedSolver(negative_laplacian(g), "dd", partition(g, 4, 0.5, 4), tol=1e-14, maxit=1)
    with pytest.raises(SpatialSolverError):
        solver.solve(1.0, rng.standard_normal(g.size))


def test_shifted_solver_validation():
    with pytest.raises(ValueError):
        ShiftedSolver(sp.eye(3), "dd")
    with pytest.raises(ValueError):
        ShiftedSolver(sp.eye(3), "multigrid")
