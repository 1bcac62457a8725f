import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from taxflow.errors import KernelError
from taxflow.heatkernel import (delta, fit_gaussian_bound, gaussian_bound_margin, l1_distance,
                                propagate, semigroup_residual, small_time_gaussian, solve_kernel,
                                stiffness)
from taxflow.model import Grid, GridFunction, edge_cutoff

from oracles import laplace_kernel

WIDE = Grid(0.25, 10.25, 401)
ONE = GridFunction(WIDE, 1.0)
MID = float(WIDE.nodes[200])


def bumpy_sigma(grid):
    return GridFunction(grid, (1 + 0.3 * np.sin(np.asarray(grid.nodes))) * edge_cutoff(grid, 0.1))


@pytest.fixture(scope="module")
def star(optimum):
    _, snap, _ = optimum
    g = snap.grid
    return snap.sigma, float(g.nodes[g.index_of(g.y_min + 0.6 * g.span)])


def test_every_slice_has_unit_mass(star):
    sigma, x = star
    k = solve_kernel(sigma, x, [0.001, 0.01, 0.1, 0.5])
    w = np.asarray(sigma.grid.weights)
    assert np.max(np.abs(k.states @ w - 1.0)) < 1e-6
    assert k.states.min() >= -1e-10


def test_backward_euler_is_nonnegative(star):
    sigma, x = star
    k = solve_kernel(sigma, x, [0.01, 0.1], scheme="be")
    assert k.states.min() >= 0.0


def test_kernel_symmetry(star):
    sigma, _ = star
    g = sigma.grid
    idx = [g.index_of(g.y_min + f * g.span) for f in (0.4, 0.55, 0.7, 0.85)]
    ts = [0.01, 0.05]
    ks = {i: solve_kernel(sigma, float(g.nodes[i]), ts) for i in idx}
    worst = 0.0
    for a in idx:
        for b in idx:
            for t in ts:
                worst = max(worst, abs(ks[a].slice_at(t).values[b] - ks[b].slice_at(t).values[a]))
    assert worst < 1e-6


def test_constant_conductivity_peak():
    k = solve_kernel(ONE, MID, [0.25])
    peak = k.slice_at(0.25).values[200]
    assert abs(peak - 1 / math.sqrt(math.pi)) < 0.01 / math.sqrt(math.pi)


def test_constant_conductivity_converges_to_laplace_kernel():
    errs = []
    for n in (401, 801):
        g = Grid(0.25, 10.25, n)
        k = solve_kernel(GridFunction(g, 1.0), MID, [0.1])
        ref = GridFunction(g, laplace_kernel(MID, np.asarray(g.nodes), 0.1))
        errs.append(l1_distance(k.slice_at(0.1), ref))
    assert errs[0] < 5e-3
    assert errs[0] / errs[1] > 3.5


def test_gaussian_for_constant_conductivity_has_no_drift():
    g = small_time_gaussian(ONE, MID, 0.1)
    y = np.asarray(WIDE.nodes)
    assert np.allclose(g.values, laplace_kernel(MID, y, 0.1), rtol=1e-14, atol=0)


def test_gaussian_slice_has_unit_mass():
    g = small_time_gaussian(ONE, MID, 0.2)
    assert abs(np.dot(WIDE.weights, g.values) - 1) < 1e-4


def test_semigroup_residual_and_refinement():
    r1 = semigroup_residual(ONE, MID, 0.05, 0.05)
    fine = Grid(0.25, 10.25, 801)
    r2 = semigroup_residual(GridFunction(fine, 1.0), MID, 0.05, 0.05)
    assert r1 < 5e-3
    assert r1 / r2 >= 3.5


def test_semigroup_modes_agree():
    a = semigroup_residual(ONE, MID, 0.02, 0.03, mode="matrix")
    b = semigroup_residual(ONE, MID, 0.02, 0.03, mode="propagate")
    assert abs(a - b) < 1e-12


def test_semigroup_identity_composition():
    assert semigroup_residual(ONE, MID, 0.05, 0.0) == 0.0


def test_full_matrix_mode_size_limit():
    big = Grid(0.25, 10.25, 2001)
    with pytest.raises(KernelError):
        semigroup_residual(GridFunction(big, 1.0), MID, 0.01, 0.01)


def test_short_time_gaussian_distance_shrinks(star):
    for sigma, x in (star, (bumpy_sigma(star[0].grid), star[1])):
        ts = [0.01, 0.02, 0.04]
        k = solve_kernel(sigma, x, ts)
        d = [l1_distance(k.slice_at(t), small_time_gaussian(sigma, x, t)) for t in ts]
        assert d[0] < 0.05
        assert d[0] < d[1] < d[2]


def test_laplacian_gaussian_bound_is_tight():
    k = solve_kernel(ONE, MID, [0.05, 0.1, 0.25])
    c1 = 1 / math.sqrt(4 * math.pi)
    m = gaussian_bound_margin(k, c1, 0.0, 0.25, floor=0.1)
    assert -5e-3 < m < 1e-3
    # the gap is discretization: a finer time step tightens it
    k2 = solve_kernel(ONE, MID, [0.05, 0.1, 0.25], dt=0.25 * WIDE.dy ** 2)
    assert abs(gaussian_bound_margin(k2, c1, 0.0, 0.25, floor=0.1)) < abs(m)


def test_fitted_gaussian_bound_certifies(star):
    for sigma, x in (star, (bumpy_sigma(star[0].grid), star[1])):
        k = solve_kernel(sigma, x, [0.005, 0.01, 0.02, 0.05])
        c = fit_gaussian_bound(k)
        assert gaussian_bound_margin(k, *c) >= 0.0


def test_doubling_c1_adds_log_two(star):
    sigma, x = star
    k = solve_kernel(sigma, x, [0.01, 0.05])
    c = fit_gaussian_bound(k)
    m1 = gaussian_bound_margin(k, *c)
    m2 = gaussian_bound_margin(k, 2 * c[0], c[1], c[2])
    assert abs(m2 - m1 - math.log(2)) < 1e-12


@given(st.integers(0, 2 ** 32 - 1))
def test_comparison_principle(seed):
    rng = np.random.default_rng(seed)
    sigma = bumpy_sigma(Grid(0.5, 3.5, 201))
    u = rng.normal(size=201)
    v = u + rng.uniform(0, 1, size=201)
    ut = propagate(sigma, u, 0.01)
    vt = propagate(sigma, v, 0.01)
    assert np.all(ut <= vt + 1e-10)


def test_stiffness_is_symmetric_and_annihilates_constants(star):
    sigma, _ = star
    d, off = stiffness(sigma)
    K = np.diag(d) + np.diag(off, 1) + np.diag(off, -1)
    assert np.array_equal(K, K.T)
    assert np.max(np.abs(K @ np.ones(d.size))) < 1e-9 * d.max()


def test_source_must_be_interior_node():
    with pytest.raises(KernelError):
        solve_kernel(ONE, WIDE.y_min, [0.1])
    with pytest.raises(KernelError):
        solve_kernel(ONE, MID + 0.3 * WIDE.dy, [0.1])


def test_time_ladder_must_ascend():
    with pytest.raises(KernelError):
        solve_kernel(ONE, MID, [0.2, 0.1])


def test_delta_has_unit_mass():
    d = delta(WIDE, 0)
    assert np.dot(WIDE.weights, d) == 1.0
