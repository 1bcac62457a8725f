"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is
printed in the terminal summary (and by running this file directly)."""
import json
import math
import os
import tempfile
import time

import numpy as np
import pytest

from taxflow import cli
from taxflow.agent import build_snapshot
from taxflow.config import validate
from taxflow.fairness import fairness_residual, fairness_suite
from taxflow.flow import (evolve, feynman_kac_estimate, frozen_step, short_time_prediction,
                          sobolev_gap, stationary_tau, FrozenStatistics)
from taxflow.heatkernel import l1_distance, semigroup_residual, small_time_gaussian, solve_kernel
from taxflow.model import Grid, GridFunction, Preferences, SkillModel, edge_cutoff
from taxflow.optimal import diamond_check, interior_compact, solve_optimal
from taxflow.revenue import gateaux, gateaux_fd_oracle
from taxflow.spectral import active_block, decay_certificate, eigensolve, frozen_trajectory

RESULTS = {}

GRID = Grid(0.25, 5.6, 801)
SKILLS = SkillModel(location=math.log(1.2), scale=0.4, taper=0.25)
PREFS = Preferences(0.5)


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    return ok


def node(grid, frac):
    return float(grid.nodes[grid.index_of(grid.y_min + frac * grid.span)])


def smooth_tax(grid, rng):
    u = (np.asarray(grid.nodes) - grid.y_min) / grid.span
    rate = 0.15 + 0.03 * sum(rng.uniform(-1, 1) * np.sin((k + 1) * np.pi * u) / (k + 1) for k in range(3))
    return GridFunction(grid, np.concatenate(([0.0], np.cumsum(0.5 * grid.dy * (rate[1:] + rate[:-1])))))


def reform(grid, rng, edge=0.05):
    y = np.asarray(grid.nodes)
    u = np.clip((y - grid.y_min - edge * grid.span) / ((1 - 2 * edge) * grid.span), 0, 1)
    v = sum(rng.normal() * np.sin((k + 1) * np.pi * u) for k in range(4)) * np.sin(np.pi * u) ** 2
    return GridFunction(grid, v)


def mean_zero_on_block(sigma, rng, modes=6):
    g = sigma.grid
    i0, i1 = active_block(sigma)
    y = np.asarray(g.nodes)
    u = np.clip((y - y[i0]) / (y[i1] - y[i0]), 0, 1)
    env = np.sin(np.pi * u) ** 2
    z = env * sum(rng.normal() / (k + 1) * np.cos((k + 1) * np.pi * u) for k in range(modes))
    w = np.asarray(g.weights)
    return z - env * np.dot(w, z) / np.dot(w, env)


@pytest.fixture(scope="module")
def solved():
    t0 = time.perf_counter()
    T, snap, rep = solve_optimal(SKILLS, PREFS, GRID, damping=0.3)
    return T, snap, rep, time.perf_counter() - t0


def test_criterion_1_first_variation_fidelity():
    g = Grid(0.25, 5.6, 401)
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        T = smooth_tax(g, rng)
        s = build_snapshot(T, PREFS, SKILLS, n_theta=801, verify=False)
        Th = reform(g, rng)
        a = gateaux(T, Th, s)
        b = gateaux_fd_oracle(T, Th, 1e-4, s, verify=False)
        worst = max(worst, abs(a - b) / abs(a))
    dt = time.perf_counter() - t0
    ok = worst < 1e-3 and dt < 60
    assert record(1, ok, f"max relative gap {worst:.2e} (< 1e-3), {dt:.1f} s (< 60 s)")


def test_criterion_2_optimality_certificate(solved):
    T, snap, rep, dt = solved
    gap = diamond_check(T, SKILLS, PREFS, snap)
    ok = rep.converged and rep.foc_residual < 1e-4 and rep.top_rate < 1e-3 and gap < 1e-2 and dt < 300
    assert record(2, ok, f"FOC {rep.foc_residual:.2e} (< 1e-4), top rate {rep.top_rate:.2e} (< 1e-3), "
                         f"Diamond gap {gap:.2e} (< 1e-2), {dt:.1f} s (< 300 s)")


def test_criterion_3_heat_kernel_suite(solved):
    _, snap, _, _ = solved
    sigma = snap.sigma
    g = sigma.grid
    idx = [g.index_of(g.y_min + f * g.span) for f in (0.4, 0.55, 0.7, 0.85)]
    ts = [0.001, 0.01, 0.05]
    ks = {i: solve_kernel(sigma, float(g.nodes[i]), ts) for i in idx}
    w = np.asarray(g.weights)
    mass = max(float(np.max(np.abs(k.states @ w - 1))) for k in ks.values())
    sym = max(abs(ks[a].slice_at(t).values[b] - ks[b].slice_at(t).values[a])
              for a in idx for b in idx for t in ts)
    wide = Grid(0.25, 10.25, 401)
    x = float(wide.nodes[200])
    r1 = semigroup_residual(GridFunction(wide, 1.0), x, 0.05, 0.05)
    r2 = semigroup_residual(GridFunction(wide.refined(), 1.0), x, 0.05, 0.05)
    peak = solve_kernel(GridFunction(wide, 1.0), x, [0.25]).slice_at(0.25).values[200]
    rel_peak = abs(peak * math.sqrt(math.pi) - 1)
    ok = mass < 1e-6 and sym < 1e-6 and r1 < 5e-3 and r1 / r2 >= 3.5 and rel_peak < 0.01
    assert record(3, ok, f"mass defect {mass:.1e} (< 1e-6), symmetry {sym:.1e} (< 1e-6), "
                         f"semigroup {r1:.2e} (< 5e-3) shrinking {r1 / r2:.2f}x (>= 3.5), "
                         f"peak off 1/sqrt(pi) by {rel_peak:.1e} (< 1e-2)")


def test_criterion_4_short_time_asymptotics(solved):
    _, snap, _, _ = solved
    g = GRID
    x = node(g, 0.6)
    ts = [0.01, 0.02, 0.04]
    k = solve_kernel(snap.sigma, x, ts)
    d = [l1_distance(k.slice_at(t), small_time_gaussian(snap.sigma, x, t)) for t in ts]
    T0 = GridFunction(g, 0.1 * (np.asarray(g.nodes) - g.y_min))
    s0 = build_snapshot(T0, PREFS, SKILLS, verify=False)
    xs = [node(g, f) for f in np.linspace(0.3, 0.8, 11)]
    h = 5e-5
    err = []
    for dt in (4 * h, 2 * h, h):
        out = frozen_step(T0, s0, dt)
        err.append(max(abs(short_time_prediction(T0, s0, dt, p) - out.values[g.index_of(p)]) for p in xs))
    ratio = max(err[1] / err[0], err[2] / err[1])
    rng = np.random.default_rng(17)
    z = []
    for j, f in enumerate(rng.uniform(0.3, 0.8, 10)):
        p = node(g, f)
        m, se = feynman_kac_estimate(T0, s0, 1e-4, p, 100_000, seed=0, stream=j)
        z.append(abs(m - short_time_prediction(T0, s0, 1e-4, p)) / se)
    ok = d[0] < 0.05 and d[0] < d[1] < d[2] and ratio < 0.7 and max(z) < 3
    assert record(4, ok, f"Gaussian L1 {d[2]:.3f} > {d[1]:.3f} > {d[0]:.3f} (< 0.05), "
                         f"error ratio {ratio:.2f} (< 0.7), FK worst {max(z):.2f} stderr (< 3) over 10 probes")


def test_criterion_5_fairness(solved):
    T, snap, _, _ = solved
    g = GRID
    probes = [node(g, f) for f in (0.55, 0.625, 0.7, 0.775, 0.85)]
    times = [c * g.span ** 2 for c in (0.00125, 0.0025, 0.005, 0.01)]
    rep = fairness_suite(T, snap, probes, times)
    r = float(np.max(rep.relative()))
    dr = float(np.max(rep.derivative_relative()))
    x = node(g, 0.7)
    t = 0.0025 * g.span ** 2
    k = solve_kernel(snap.sigma, x, [t])
    y = np.asarray(g.nodes)
    u = np.clip((y - x) / 0.5 + 0.5, 0, 1)
    base = fairness_residual(T, snap, k, t)
    bumped = fairness_residual(T + GridFunction(g, 0.01 * np.sin(np.pi * u) ** 2), snap, k, t)
    ok = r < 1e-3 and dr < 5e-3 and bumped >= 10 * base
    assert record(5, ok, f"invariance {r:.1e} of sup T (< 1e-3), marginal {dr:.1e} of sup T' (< 5e-3), "
                         f"bump/optimum {bumped / base:.1e} (>= 10)")


def test_criterion_6_gradient_flow(solved):
    T, snap, _, _ = solved
    T0 = GridFunction(GRID, 0.1 * (np.asarray(GRID.nodes) - GRID.y_min))
    runs = [evolve(T0, 5e-4, dt, dt, SKILLS, PREFS, verify=False) for dt in (5e-5, 2.5e-5, 1.25e-5)]
    drop = float(np.min(np.diff(runs[0].revenues)))
    ends = [tr.states[-1].tax.values for tr in runs]
    ratio = np.max(np.abs(ends[1] - ends[2])) / np.max(np.abs(ends[0] - ends[1]))
    tr = evolve(T, 5e-4, 5e-5, 5e-5, SKILLS, PREFS, verify=False)
    c = interior_compact(snap)
    moved = max(float(np.max(np.abs(s.tax.values - T.values)[c])) for s in tr.states)
    ok = drop >= -1e-10 and moved < 1e-5 and 0.35 <= ratio <= 0.65
    assert record(6, ok, f"smallest revenue step {drop:.2e} (>= -1e-10), optimum moved {moved:.1e} "
                         f"on the interior compact (< 1e-5), Richardson ratio {ratio:.3f} (in [0.35, 0.65])")


def test_criterion_7_spectral_decay(solved):
    _, snap, _, _ = solved
    rod = Grid(1.0, 2.0, 401)
    one = GridFunction(rod, 1.0)
    sp = eigensolve(one, 5)
    lam_err = abs(sp.lambda1 / math.pi ** 2 - 1)
    zero = GridFunction(rod, 0.0)
    t = 1 / sp.lambda1
    tr = frozen_trajectory(zero + 0.3 * sp.eigenfunctions[1], zero, FrozenStatistics(one, zero), t / 400, 400)
    z = tr.states[-1] - tr.reference[-1]
    mode_err = abs(float(np.dot(rod.weights, z * z)) / (0.09 * math.exp(-2 * sp.lambda1 * t)) - 1)
    margins = []
    rng = np.random.default_rng(7)
    tapered = GridFunction(rod, edge_cutoff(rod, 0.02))
    lam_t = eigensolve(tapered, 5).lambda1
    for _ in range(20):
        T0 = zero + GridFunction(rod, mean_zero_on_block(tapered, rng))
        trj = frozen_trajectory(T0, zero, FrozenStatistics(tapered, zero), 0.025 / lam_t, 20)
        margins.append(decay_certificate(trj, zero, lam_t))
    tau = stationary_tau(snap).tau
    lam_s = eigensolve(snap.sigma, 5).lambda1
    for _ in range(20):
        T0 = tau + GridFunction(GRID, 0.01 * mean_zero_on_block(snap.sigma, rng))
        trj = frozen_trajectory(T0, tau, snap, 0.05 / 20, 20)
        margins.append(decay_certificate(trj, tau, lam_s))
    ok = lam_err < 5e-3 and mode_err < 1e-4 and min(margins) >= -1e-8
    assert record(7, ok, f"rod lambda1 off pi^2 by {lam_err:.1e} (< 5e-3), single-mode decay off by "
                         f"{mode_err:.1e} (< 1e-4), worst of 40 certificates {min(margins):.1e} (>= -1e-8)")


def test_criterion_8_smoothing(solved):
    _, snap, _, _ = solved
    g = GRID
    y = np.asarray(g.nodes)
    step = GridFunction(g, np.where(y < g.y_min + 0.6 * g.span, 0.0, 0.3))
    out = frozen_step(step, snap, 5e-4)
    shrink = np.max(np.abs(np.diff(step.values, 2))) / np.max(np.abs(np.diff(out.values, 2)))
    T0 = GridFunction(g, 0.1 * (y - g.y_min))
    s0 = build_snapshot(T0, PREFS, SKILLS, verify=False)
    tau = stationary_tau(s0, region="block").tau
    _, states = frozen_step(T0, s0, 100 * 5e-4, 100, record=True)
    J = np.array([sobolev_gap(GridFunction(g, v), tau, s0.sigma) for v in states])
    rise = float(np.max(np.diff(J)))
    ok = shrink >= 10 and rise <= 0
    assert record(8, ok, f"second difference shrinks {shrink:.1f}x in one step (>= 10), "
                         f"largest change of J over {len(J) - 1} substeps {rise:.2e} (<= 0)")


def _outputs(path):
    out = {}
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as fh:
            data = fh.read()
        if name == "manifest.json":
            m = json.loads(data)
            m.pop("wall_clock")
            data = json.dumps(m, sort_keys=True).encode()
        out[name] = data
    return out


def test_criterion_9_determinism():
    cfg = validate({})
    old = os.environ.get("TAXFLOW_THREADS")
    outs = []
    try:
        with tempfile.TemporaryDirectory() as tmp:
            for i, threads in enumerate(("4", "4", "1")):
                os.environ["TAXFLOW_THREADS"] = threads
                d = os.path.join(tmp, str(i))
                cli.run(cfg, "all", d)
                outs.append(_outputs(d))
    finally:
        if old is None:
            os.environ.pop("TAXFLOW_THREADS", None)
        else:
            os.environ["TAXFLOW_THREADS"] = old
    ok = outs[0] == outs[1] == outs[2]
    assert record(9, ok, f"{len(outs[0])} files identical across two runs and 4 vs 1 threads")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
