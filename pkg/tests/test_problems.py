from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import scipy.sparse as sp

from ctmgrit.grid import AnisoGrid, LevelIndex, negative_laplacian
from ctmgrit.problems import (
    CmeProblem,
    HeatProblem,
    LinearSdeProblem,
    Reaction,
    assemble_cme_operator,
    assemble_fokker_planck_operator,
    assemble_heat_operator,
    covariance_closed_form,
    first_derivative,
    gaussian_pdf,
    gaussian_solution,
    gillespie_ssa,
    second_derivative,
    stationary_covariance,
)

# -- heat ---------------------------------------------------------------------------


def test_heat_operator_1d():
    A = assemble_heat_operator(AnisoGrid(LevelIndex((2,)))).toarray()
    assert np.allclose(A, [[32, -16, 0], [-16, 32, -16], [0, -16, 32]])


def test_heat_operator_symmetric_positive():
    A = assemble_heat_operator(AnisoGrid(LevelIndex((3, 4))))
    assert (A - A.T).nnz == 0
    assert np.linalg.eigvalsh(A.toarray()).min() > 0


def test_heat_operator_sine_eigenvector():
    g = AnisoGrid(LevelIndex((4, 4)))
    v = np.prod(np.sin(np.pi * g.coordinates), axis=1)
    Av = assemble_heat_operator(g) @ v
    lam = (Av @ v) / (v @ v)
    assert abs(lam / (2 * np.pi**2) - 1) < 0.02
    assert np.allclose(Av, lam * v)


def test_manufactured_solution_vanishes_on_boundary():
    p = HeatProblem(3)
    x = np.random.default_rng(0).random((50, 3))
    x[:, 1] = 1.0
    assert np.allclose(p.exact(x, 0.3), 0.0, atol=1e-15)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_heat_forcing_matches_finite_difference_oracle(d):
    # fourth-order central differences in t and every x_i on the exact solution
    p = HeatProblem(d)
    rng = np.random.default_rng(d)
    n = 1000
    x = 0.05 + 0.9 * rng.random((n, d))
    t = 0.05 + 0.95 * rng.random(n)
    h = 1e-3
    u = lambda xx, tt: np.array([p.exact(xx[k : k + 1], tt[k])[0] for k in range(len(tt))])  # noqa: E731
    dt = (-u(x, t + 2 * h) + 8 * u(x, t + h) - 8 * u(x, t - h) + u(x, t - 2 * h)) / (12 * h)
    lap = np.zeros(n)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        lap += (-u(x + 2 * e, t) + 16 * u(x + e, t) - 30 * u(x, t) + 16 * u(x - e, t) - u(x - 2 * e, t)) / (12 * h**2)
    f = np.array([p.source(x[k : k + 1], t[k])[0] for k in range(n)])
    assert np.abs(f - (dt - lap)).max() <= 1e-6


# -- linear SDE Fokker-Planck ----------------------------------------------------------


def test_fp_pure_diffusion_is_negative_laplacian():
    p = LinearSdeProblem(np.zeros((2, 2)), np.eye(2), np.eye(2), [0, 0], np.eye(2), (-1, -1), (1, 1))
    assert np.allclose(p.H, 2 * np.eye(2))
    g = AnisoGrid(LevelIndex((3, 4)), p.lower, p.upper)
    assert abs(assemble_fokker_planck_operator(g, p) - negative_laplacian(g)).max() < 1e-10


def test_oscillator_diffusion_matrix():
    assert np.allclose(LinearSdeProblem.oscillator().H, [[0, 0], [0, 0.2]])


def test_fp_mixed_derivative_is_symmetric_sum():
    # H with off-diagonal entries: assembled mixed term equals -1/2 (H_12 + H_21) D1 D2
    sigma = np.array([[1.0, 0.0], [0.5, 1.0]])
    p = LinearSdeProblem(np.zeros((2, 2)), sigma, 0.5 * np.eye(2), [0, 0], np.eye(2), (-1, -1), (1, 1))
    g = AnisoGrid(LevelIndex((3, 3)), p.lower, p.upper)
    H = p.H
    ref = sum(-0.5 * H[i, i] * second_derivative(g, i, i) for i in range(2)) - H[0, 1] * second_derivative(g, 0, 1)
    assert abs(assemble_fokker_planck_operator(g, p) - ref).max() < 1e-10


def test_fp_drift_conserves_mass_in_interior():
    p = LinearSdeProblem.oscillator()
    g = AnisoGrid(LevelIndex((5, 5)), p.lower, p.upper)
    drift = (
        assemble_fokker_planck_operator(g, p)
        + 0.5 * p.H[1, 1] * second_derivative(g, 1, 1)
    )
    col = np.asarray(drift.sum(axis=0)).ravel()
    mi = g.multi_index(np.arange(g.size))
    interior = np.all((mi > 1) & (mi < np.array(g.shape)), axis=1)
    assert np.abs(col[interior]).max() < 1e-10
    # the full operator conserves mass for densities that vanish near the boundary
    u = g.sample(lambda x: gaussian_pdf(x, [0, 0], np.eye(2)))
    assert abs(np.sum(assemble_fokker_planck_operator(g, p) @ u)) < 1e-8


def test_sde_validation():
    with pytest.raises(ValueError):
        LinearSdeProblem(np.zeros((2, 2)), np.eye(2), -np.eye(2), [0, 0], np.eye(2), (-1, -1), (1, 1))


def test_gaussian_initial_and_standard_density():
    p = LinearSdeProblem.oscillator()
    g0 = gaussian_solution(p, 0.0)
    assert np.allclose(g0.mean, p.M) and np.allclose(g0.cov, p.C)
    assert gaussian_pdf(np.zeros(2), np.zeros(2), np.eye(2))[0] == pytest.approx(1 / (2 * np.pi))
    with pytest.raises(ValueError):
        gaussian_solution(p, -1.0)


def test_oscillator_stationary_covariance_identity():
    assert np.allclose(stationary_covariance(LinearSdeProblem.oscillator()), np.eye(2), atol=1e-12)


def test_covariance_integrator_matches_closed_form():
    p = LinearSdeProblem.oscillator()
    for t in (0.5, 10.0, 50.0):
        assert np.abs(gaussian_solution(p, t).cov - covariance_closed_form(p, t)).max() <= 1e-8


def test_linear4d_covariance_matches_closed_form():
    p = LinearSdeProblem.linear4d()
    assert np.abs(gaussian_solution(p, 2.0).cov - covariance_closed_form(p, 2.0)).max() <= 1e-8


# -- CME ---------------------------------------------------------------------------


def test_cme_single_reaction_is_advection_diffusion():
    a = 2.5
    p = CmeProblem([Reaction([1, 0], lambda x: np.full(len(x), a))], (0, 0), (15, 15), [7, 7], np.eye(2))
    g = AnisoGrid(LevelIndex((4, 4)), p.lower, p.upper)
    ref = a * first_derivative(g, 0) - 0.5 * a * second_derivative(g, 0, 0)
    assert abs(assemble_cme_operator(g, p) - ref).max() < 1e-12


def test_cme_mixed_stoichiometry():
    p = CmeProblem([Reaction([1, -1], lambda x: np.ones(len(x)))], (0, 0), (15, 15), [7, 7], np.eye(2))
    g = AnisoGrid(LevelIndex((3, 3)), p.lower, p.upper)
    ref = (
        first_derivative(g, 0) - first_derivative(g, 1)
        - 0.5 * (second_derivative(g, 0, 0) + second_derivative(g, 1, 1) - 2 * second_derivative(g, 0, 1))
    )
    assert abs(assemble_cme_operator(g, p) - ref).max() < 1e-12


def test_toggle_propensity_at_zero_repressor():
    p = CmeProblem.toggle_switch_2d()
    a = p.propensities(np.array([[50.0, 0.0]]))[0]
    assert a[0] == pytest.approx(3000 / 11000)
    assert a[1] == pytest.approx(0.05)


def test_toggle_3d_assembles():
    p = CmeProblem.toggle_switch_3d()
    g = AnisoGrid(LevelIndex((4, 4, 4)), p.lower, p.upper)
    A = assemble_cme_operator(g, p)
    assert A.shape == (g.size, g.size) and np.all(np.isfinite(A.data))
    a = p.propensities(np.array([[10.0, 3.0, 4.0]]))[0]
    assert a[0] == pytest.approx(3000 / (11000 + 49))


def test_toggle_propensities_nonnegative():
    p = CmeProblem.toggle_switch_2d()
    g = AnisoGrid(LevelIndex((5, 5)), p.lower, p.upper)
    assert np.all(p.propensities(g.coordinates) >= 0)


# -- SSA ---------------------------------------------------------------------------


def test_ssa_zero_propensity_point_mass():
    p = CmeProblem([Reaction([1, 0], lambda x: np.zeros(len(x)))], (0, 0), (10, 10), [3, 4], np.eye(2))
    res = gillespie_ssa(p, [3, 4], 5.0, 100, seed=1)
    assert res.pmf[3, 4] == 1.0 and res.events == 0


def test_ssa_pure_death_mean_decays():
    p = CmeProblem([Reaction([-1], lambda x: 1.0 * x[:, 0])], (0,), (200,), [200], np.eye(1))
    res = gillespie_ssa(p, [200], 3.0, 2000, seed=0)
    assert res.mean()[0] == pytest.approx(200 * np.exp(-3.0), rel=0.05)
    assert res.pmf.sum() == pytest.approx(1.0)


def test_ssa_deterministic_and_schedule_independent():
    p = CmeProblem.toggle_switch_2d()
    a = gillespie_ssa(p, [133, 133], 200.0, 300, seed=7, chunk=64)
    b = gillespie_ssa(p, [133, 133], 200.0, 300, seed=7, chunk=64)
    with ThreadPoolExecutor(4) as pool:
        c = gillespie_ssa(p, [133, 133], 200.0, 300, seed=7, chunk=64, pmap=pool.map)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.samples, c.samples)
    d = gillespie_ssa(p, [133, 133], 200.0, 300, seed=8, chunk=64)
    assert not np.array_equal(a.samples, d.samples)


def test_ssa_rejects_negative_propensity():
    p = CmeProblem([Reaction([1], lambda x: -np.ones(len(x)))], (0,), (10,), [1], np.eye(1))
    with pytest.raises(ValueError):
        gillespie_ssa(p, [1], 1.0, 5)
    with pytest.raises(ValueError):
        gillespie_ssa(p, [1], 1.0, 0)
