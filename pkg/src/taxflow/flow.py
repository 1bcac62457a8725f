"""Gradient flow of taxes by operator splitting.

Each outer step freezes ``φ`` and ``σ = εφ`` from a snapshot, advances the
heat equation ``∂T/∂t = φ + ∂_y(σ ∂_y T)`` with Crank-Nicolson on the
kernel stencil, then re-solves the agents.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from . import _kernels
from .agent import EconomySnapshot, build_snapshot
from .errors import KernelError, SnapshotError, TaxflowError
from .heatkernel import apply_operator, flux_operator, half_node_sigma
from .model import Grid, GridFunction, Preferences, SkillModel, derivative
from .optimal import continue_outside, interior_span
from .revenue import revenue

CHUNK = 4096


@dataclass(frozen=True, eq=False)
class FrozenStatistics:
    """Conductivity and source held fixed during one heat step."""

    sigma: GridFunction
    phi: GridFunction

    @classmethod
    def of(cls, stats) -> "FrozenStatistics":
        return stats if isinstance(stats, cls) else cls(stats.sigma, stats.phi)


def max_rate(bands) -> float:
    """Gershgorin bound on the largest decay rate of the operator."""
    return float(2.0 * np.max(np.abs(bands[1])))


def substeps_for(bands, dt: float, n_substeps: int = 1) -> int:
    """At least ``n_substeps`` and enough that every mode has ``λ dt_sub <= 2``.

    On that range the Crank-Nicolson factor ``(1 - x/2)/(1 + x/2)`` lies in
    ``[0, e^{-x}]``, so substeps never amplify, never flip the sign of a mode
    and decay at least as fast as the exact semigroup.
    """
    need = math.ceil(dt * max_rate(bands) / 2.0 * (1 + 1e-12))
    return max(int(n_substeps), need, 1)


def frozen_step(T: GridFunction, stats, dt: float, n_substeps: int = 1,
                record: bool = False):
    """Advance ``T`` by ``dt`` under frozen statistics.

    Returns the new tax, or ``(tax, states)`` with every substep state when
    ``record`` is true.
    """
    if dt <= 0:
        raise KernelError("time step must be positive")
    fs = FrozenStatistics.of(stats)
    bands = flux_operator(fs.sigma)
    n = substeps_for(bands, dt, n_substeps)
    lower, diag, upper = bands
    states = _kernels.theta_march(lower, diag, upper, T.values, fs.phi.values, dt / n, n, 0.5, record)
    last = states[-1] if record else states
    if not np.all(np.isfinite(last)):
        raise KernelError("frozen step produced non-finite values")
    out = GridFunction(T.grid, last)
    return (out, states) if record else out


def sobolev_gap(T: GridFunction, tau: GridFunction, sigma: GridFunction) -> float:
    """``½ ∫ σ (T' - τ')² dy`` with the half-node stencil of the heat step."""
    e = T.values - tau.values
    de = np.diff(e) / T.grid.dy
    return 0.5 * float(np.sum(half_node_sigma(sigma) * de * de) * T.grid.dy)


def energy(T: GridFunction, stats) -> float:
    """``½ ∫ σ T'² dy - ∫ φ T dy``; the frozen step is its L² gradient flow.

    Differs from :func:`sobolev_gap` by a constant when ``τ`` is stationary.
    """
    fs = FrozenStatistics.of(stats)
    zero = GridFunction(T.grid, 0.0)
    return sobolev_gap(T, zero, fs.sigma) - float(np.dot(T.grid.weights, fs.phi.values * T.values))


@dataclass(frozen=True, eq=False)
class StationaryReference:
    tau: GridFunction
    snapshot_t: float
    residual: float
    stationary: np.ndarray  # nodes where the residual was checked


def stationary_tau(snapshot: EconomySnapshot, region: str = "interior") -> StationaryReference:
    """Solve ``0 = φ + (σ τ')'`` with zero flux at the top.

    The discrete flux through each half node equals the weighted mass of ``φ``
    above it, so the flux-form residual vanishes to rounding wherever that
    slope is used.  With ``region='interior'`` the slope is used on the
    interior and continued outside it as for the optimal rates, which keeps
    ``τ`` comparable with the optimal tax.  With ``region='block'`` it is used
    at every half node of positive conductivity; ``τ`` is then stationary at
    every node the flux reaches except the lowest, where the unit mass of
    ``φ`` would have to enter through a vanishing conductivity (with zero-flux
    ends no exact stationary state exists).  ``½∫σ(T'-τ')²`` then differs from
    :func:`energy` only by that node's mass flux times ``T`` there, which
    barely moves, so it descends along the frozen step.
    ``τ(y_min) = T(y_min)`` in both cases.
    """
    g = snapshot.grid
    lo, hi = interior_span(snapshot.interior)
    sh = half_node_sigma(snapshot.sigma)
    if np.any(sh[lo:hi] <= 0):
        raise SnapshotError("conductivity vanishes on the interior")
    w = np.asarray(g.weights)
    above = np.concatenate((np.cumsum((w * snapshot.phi.values)[::-1])[::-1][1:], [0.0]))[:-1]
    if region == "interior":
        yh = np.asarray(g.nodes)[:-1] + 0.5 * g.dy
        slope = np.zeros(g.n - 1)
        slope[lo:hi] = above[lo:hi] / sh[lo:hi]
        slope = continue_outside(slope, lo, hi - 1, yh, snapshot.y_of_theta[0], snapshot.y_of_theta[-1])
        check = np.zeros(g.n, dtype=bool)
        check[lo + 1:hi] = True
    elif region == "block":
        pos = sh > 0
        slope = np.where(pos, above / np.where(pos, sh, 1.0), 0.0)
        check = np.zeros(g.n, dtype=bool)
        check[:-1] |= pos
        check[1:] |= pos
        check[int(np.argmax(pos))] = False
    else:
        raise ValueError(f"unknown region {region!r}")
    tau = snapshot.tax.values[0] + np.concatenate(([0.0], np.cumsum(g.dy * slope)))
    tau_f = GridFunction(g, tau)
    r = apply_operator(flux_operator(snapshot.sigma), tau) + snapshot.phi.values
    res = float(np.max(np.abs(r[check])))
    if res > 1e-6 * max(1.0, snapshot.phi.sup()):
        raise SnapshotError(f"stationary residual {res:.3e} on the {region}")
    return StationaryReference(tau_f, snapshot.t, res, check)


@dataclass
class FlowState:
    t: float
    tax: GridFunction
    snapshot: EconomySnapshot
    revenue: float


@dataclass
class FlowTrajectory:
    states: list
    dt_outer: float
    dt_inner: float
    aborted: str | None = None

    @property
    def times(self):
        return np.array([s.t for s in self.states])

    @property
    def revenues(self):
        return np.array([s.revenue for s in self.states])


class FlowAborted(TaxflowError):
    def __init__(self, msg, trajectory):
        super().__init__(msg)
        self.trajectory = trajectory


def evolve(T0: GridFunction, t_end: float, dt_outer: float, dt_inner: float,
           skills: SkillModel, prefs: Preferences, grid: Grid | None = None,
           n_theta: int = 801, sigma_taper: float = 0.02, verify: bool = True,
           curvature_smoothing: float = 0.1) -> FlowTrajectory:
    """Lie splitting: snapshot, frozen heat step of ``dt_outer``, repeat to ``t_end``."""
    grid = grid or T0.grid
    n_outer = max(1, int(round(t_end / dt_outer)))
    if not math.isclose(n_outer * dt_outer, t_end, rel_tol=1e-9):
        raise ValueError("t_end must be a multiple of dt_outer")
    n_inner = max(1, int(round(dt_outer / dt_inner)))
    kw = dict(prefs=prefs, skills=skills, grid=grid, n_theta=n_theta, sigma_taper=sigma_taper,
              verify=verify, curvature_smoothing=curvature_smoothing)
    traj = FlowTrajectory([], dt_outer, dt_inner)
    T = T0
    for k in range(n_outer + 1):
        t = k * dt_outer
        try:
            snap = build_snapshot(T, t=t, **kw)
        except SnapshotError as exc:
            traj.aborted = f"t={t:g}: {exc}"
            raise FlowAborted(f"flow aborted at t={t:g}: {exc}", traj) from exc
        traj.states.append(FlowState(t, T, snap, revenue(T, snap)))
        if k < n_outer:
            T = frozen_step(T, snap, dt_outer, n_inner)
    return traj


def short_time_prediction(T: GridFunction, snapshot, dt: float, x: float) -> float:
    """``Δt φ(x) + ∫ N(y; x + σ'(x)Δt, 2σ(x)Δt) T(y) dy``.

    The Gaussian average is a trapezoid sum on a mesh of its own (±9 standard
    deviations, clipped to the grid) with ``T`` from its cubic interpolant, so
    it stays accurate when the Gaussian is narrower than the grid spacing.
    """
    fs = FrozenStatistics.of(snapshot)
    s0 = float(fs.sigma(x))
    if s0 <= 0:
        raise KernelError("conductivity vanishes at the probe")
    g = T.grid
    mean = x + float(fs.sigma(x, 1)) * dt
    sd = math.sqrt(2.0 * s0 * dt)
    mass = 0.5 * (math.erf((g.y_max - mean) / (sd * math.sqrt(2))) - math.erf((g.y_min - mean) / (sd * math.sqrt(2))))
    if mass < 1 - 1e-4:
        raise KernelError(f"Gaussian mass on the grid is {mass:.6f}; widen the grid")
    u = np.linspace(max(g.y_min, mean - 9 * sd), min(g.y_max, mean + 9 * sd), 2001)
    k = np.exp(-0.5 * ((u - mean) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    return dt * float(fs.phi(x)) + float(trapezoid(k * T(u), u))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TAXFLOW_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def feynman_kac_estimate(T: GridFunction, snapshot, dt: float, x: float, n_paths: int = 100_000,
                         seed: int = 0, stream: int = 0, n_sub: int | None = None):
    """Monte Carlo ``E[∫_0^Δt φ(B_s) ds + T(B_Δt)]`` for ``dB = σ' ds + √(2σ) dW``.

    Paths are reflected at the grid ends.  Normals come in chunks of
    ``CHUNK`` paths, each from its own Philox stream keyed by
    ``(seed, stream, chunk)``, so results do not depend on the thread count.
    Returns ``(mean, stderr)``.
    """
    if n_paths < 2:
        raise ValueError("need at least two paths")
    fs = FrozenStatistics.of(snapshot)
    g = T.grid
    n_sub = n_sub or 20
    if n_sub < 20:
        raise ValueError("at least 20 Euler-Maruyama substeps are required")
    h = dt / n_sub
    sig = np.ascontiguousarray(fs.sigma.values)
    dsig = np.ascontiguousarray(derivative(fs.sigma).values)
    phi = np.ascontiguousarray(fs.phi.values)
    n_chunks = -(-n_paths // CHUNK)

    def chunk(c):
        size = min(CHUNK, n_paths - c * CHUNK)
        ss = np.random.SeedSequence(seed, spawn_key=(stream, c))
        z = np.random.Generator(np.random.Philox(ss)).standard_normal((size, n_sub))
        try:
            b, acc = _kernels.em_reflected(float(x), z, h, g.y_min, g.dy, sig, dsig, phi)
        except RuntimeError as exc:
            raise KernelError(str(exc)) from exc
        return acc + T(b)

    with ThreadPoolExecutor(max_workers=_threads()) as ex:
        vals = np.concatenate(list(ex.map(chunk, range(n_chunks))))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))
