import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from taxflow.errors import KernelError
from taxflow.flow import FrozenStatistics, frozen_step, stationary_tau
from taxflow.model import Grid, GridFunction, edge_cutoff
from taxflow.spectral import (active_block, decay_certificate, eigensolve, frozen_trajectory,
                              rayleigh_lambda1, rayleigh_quotient)

from oracles import generalized_eigvals

ROD = Grid(1.0, 2.0, 401)


def rod(c=1.0, grid=ROD):
    return GridFunction(grid, c)


def tapered(grid=ROD):
    return GridFunction(grid, edge_cutoff(grid, 0.02))


def stats_for(sigma):
    return FrozenStatistics(sigma, GridFunction(sigma.grid, 0.0))


def random_deviation(sigma, rng, modes=6):
    """Smooth, mean-zero, vanishing off the active block of ``sigma``."""
    g = sigma.grid
    i0, i1 = active_block(sigma)
    y = np.asarray(g.nodes)
    u = np.clip((y - y[i0]) / (y[i1] - y[i0]), 0, 1)
    env = np.sin(np.pi * u) ** 2
    z = env * sum(rng.normal() / (k + 1) * np.cos((k + 1) * np.pi * u) for k in range(modes))
    w = np.asarray(g.weights)
    z -= env * np.dot(w, z) / np.dot(w, env)
    return z


def test_rod_first_eigenvalue():
    s = eigensolve(rod(), 20)
    assert abs(s.lambda1 - math.pi ** 2) < 0.005 * math.pi ** 2
    y = np.asarray(ROD.nodes)
    c = np.cos(math.pi * (y - 1.0))
    eta = s.eigenfunctions[1].values
    corr = abs(np.dot(ROD.weights, c * eta)) / math.sqrt(np.dot(ROD.weights, c * c))
    assert corr > 1 - 1e-6


def test_zero_mode_is_constant():
    s = eigensolve(rod(), 5)
    assert abs(s.eigenvalues[0]) < 1e-8
    e0 = s.eigenfunctions[0].values
    assert np.ptp(e0) < 1e-8


def test_eigenfunctions_are_orthonormal(optimum):
    _, snap, _ = optimum
    for sigma in (rod(), tapered(), snap.sigma):
        s = eigensolve(sigma, 20)
        w = np.asarray(sigma.grid.weights)
        G = np.array([[np.dot(w, a.values * b.values) for b in s.eigenfunctions] for a in s.eigenfunctions])
        assert np.max(np.abs(G - np.eye(21))) < 1e-8
        assert abs(G[1, 2]) < 1e-8


def test_eigenvalues_match_dense_oracle():
    g = Grid(1.0, 2.0, 101)
    sigma = GridFunction(g, 1 + 0.5 * np.sin(3 * np.asarray(g.nodes)))
    ref = generalized_eigvals(sigma.values, g.dy, g.weights)
    s = eigensolve(sigma, 10)
    assert np.allclose(s.eigenvalues, ref[:11], rtol=1e-10, atol=1e-9)


def test_rayleigh_lambda1_matches_eigensolve(optimum):
    _, snap, _ = optimum
    for sigma in (rod(), tapered(), snap.sigma):
        a = eigensolve(sigma, 5).lambda1
        b = rayleigh_lambda1(sigma)
        assert abs(a - b) < 1e-8 * max(1.0, a)


def test_rayleigh_lambda1_of_rod():
    assert abs(rayleigh_lambda1(rod()) - math.pi ** 2) < 0.005 * math.pi ** 2


@given(st.floats(0.1, 10.0))
def test_lambda1_scales_with_conductivity(c):
    sigma = GridFunction(Grid(1.0, 2.0, 101), 1 + 0.5 * np.sin(np.linspace(0, 3, 101)))
    a = rayleigh_lambda1(sigma)
    b = rayleigh_lambda1(GridFunction(sigma.grid, c * sigma.values))
    assert abs(b - c * a) < 1e-10 * c * a


def test_cosine_quotient_bounds_lambda1():
    for a, b in ((1.0, 2.0), (0.5, 3.0)):
        g = Grid(a, b, 801)
        y = np.asarray(g.nodes)
        q = rayleigh_quotient(np.cos(math.pi * (y - a) / (b - a)), GridFunction(g, 1.0))
        exact = math.pi ** 2 / (b - a) ** 2
        assert abs(q - exact) < 1e-5 * exact
        assert q >= rayleigh_lambda1(GridFunction(g, 1.0)) - 1e-9


def test_quotient_rejects_constants():
    with pytest.raises(ValueError):
        rayleigh_quotient(np.ones(ROD.n), rod())


def test_refinement_is_second_order():
    lam = [rayleigh_lambda1(GridFunction(Grid(1.0, 2.0, n), 1.0)) for n in (101, 201, 401, 801)]
    d = np.abs(np.diff(lam))
    assert np.all(np.diff(lam) > 0) or np.all(np.diff(lam) < 0)
    for r in d[1:] / d[:-1]:
        assert abs(r - 0.25) < 0.02


def test_stationary_start_has_zero_margin():
    sigma = tapered()
    tau = GridFunction(ROD, 0.0)
    tr = frozen_trajectory(tau, tau, stats_for(sigma), 0.01, 10)
    assert decay_certificate(tr, tau, eigensolve(sigma, 5).lambda1) == 0.0


def test_single_mode_decays_at_lambda1():
    s = eigensolve(rod(), 5)
    lam = s.lambda1
    tau = GridFunction(ROD, 0.0)
    a = 0.3
    T0 = tau + a * s.eigenfunctions[1]
    t = 1 / lam
    tr = frozen_trajectory(T0, tau, stats_for(rod()), t / 400, 400)
    z = tr.states[-1] - tr.reference[-1]
    D = float(np.dot(ROD.weights, z * z))
    assert abs(D / (a * a * math.exp(-2 * lam * t)) - 1) < 1e-4
    assert abs(decay_certificate(tr, tau, lam)) < 1e-8


def test_mixture_decays_strictly_faster():
    s = eigensolve(tapered(), 5)
    tau = GridFunction(ROD, 0.0)
    T0 = tau + 0.2 * s.eigenfunctions[1] + 0.2 * s.eigenfunctions[3]
    tr = frozen_trajectory(T0, tau, stats_for(tapered()), 0.002, 20)
    z = tr.states - tr.reference
    D = (z * z) @ np.asarray(ROD.weights)
    gap = np.exp(-2 * s.lambda1 * tr.times) * D[0] - D
    assert np.all(gap[1:] > 0)


def test_random_certificates_on_tapered_conductivity():
    sigma = tapered()
    lam = eigensolve(sigma, 5).lambda1
    rng = np.random.default_rng(20)
    tau = GridFunction(ROD, 0.0)
    for _ in range(20):
        T0 = tau + GridFunction(ROD, random_deviation(sigma, rng))
        tr = frozen_trajectory(T0, tau, stats_for(sigma), 0.025 / lam, 20)
        assert decay_certificate(tr, tau, lam) >= -1e-8


def test_random_certificates_at_the_optimum(optimum):
    _, snap, _ = optimum
    lam = eigensolve(snap.sigma, 5).lambda1
    tau = stationary_tau(snap).tau
    rng = np.random.default_rng(21)
    for _ in range(20):
        T0 = tau + GridFunction(snap.grid, 0.01 * random_deviation(snap.sigma, rng))
        tr = frozen_trajectory(T0, tau, snap, 0.05 / 20, 20)
        assert decay_certificate(tr, tau, lam) >= -1e-8


def test_modal_evolution_matches_the_heat_step():
    sigma = tapered()
    s = eigensolve(sigma, 20)
    z0 = random_deviation(sigma, np.random.default_rng(3))
    t = 1 / s.lambda1
    modal = s.evolve(s.coefficients(z0), t)
    pde = frozen_step(GridFunction(ROD, z0), stats_for(sigma), t, 400)
    e = modal.values - pde.values
    assert math.sqrt(np.dot(ROD.weights, e * e)) < 1e-4


def test_certificate_guards():
    sigma = tapered()
    tau = GridFunction(ROD, 0.0)
    lam = eigensolve(sigma, 5).lambda1
    tr = frozen_trajectory(tau + 1.0, tau, stats_for(sigma), 0.01, 3)
    with pytest.raises(ValueError):
        decay_certificate(tr, tau, lam)
    with pytest.raises(ValueError):
        decay_certificate(tr, tau + 1.0, lam)
    outside = np.zeros(ROD.n)
    outside[0] = 1.0
    tr = frozen_trajectory(tau + GridFunction(ROD, outside), tau, stats_for(sigma), 0.01, 3)
    with pytest.raises(ValueError):
        decay_certificate(tr, tau, lam)


def test_eigensolve_validates_k():
    with pytest.raises(ValueError):
        eigensolve(rod(), 0)
    with pytest.raises(ValueError):
        eigensolve(rod(), ROD.n // 4 + 1)


def test_active_block_rejects_split_conductivity():
    v = np.ones(ROD.n)
    v[200] = 0.0
    with pytest.raises(KernelError):
        active_block(GridFunction(ROD, v))
    with pytest.raises(KernelError):
        active_block(GridFunction(ROD, 0.0))
