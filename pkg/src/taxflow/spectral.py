"""Sturm-Liouville spectrum of ``H = -d/dy(σ d/dy)`` and decay certificates.

The discrete operator is the heat step's half-node stencil with zero-flux
ends, in the trapezoid inner product: ``K η = λ W η``.  Nodes cut off by a
vanishing conductivity carry their own zero modes; the spectrum is computed
on the single connected block of nodes where the flux can move.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import KernelError
from .flow import FrozenStatistics, frozen_step
from .heatkernel import half_node_sigma, stiffness
from .model import GridFunction

ORTHO_TOL = 1e-8


def active_block(sigma: GridFunction) -> tuple[int, int]:
    """First and last node of the block joined by positive half-node conductivity."""
    sh = half_node_sigma(sigma)
    edges = np.flatnonzero(sh > 0)
    if edges.size == 0:
        raise KernelError("conductivity vanishes everywhere")
    if edges[-1] - edges[0] + 1 != edges.size:
        raise KernelError("conductivity splits the grid into several blocks")
    return int(edges[0]), int(edges[-1]) + 1


def _scaled_bands(sigma: GridFunction):
    i0, i1 = active_block(sigma)
    d, off = stiffness(sigma)
    w = np.asarray(sigma.grid.weights)
    sl = slice(i0, i1 + 1)
    ws = np.sqrt(w[sl])
    return d[sl] / w[sl], off[i0:i1] / (ws[:-1] * ws[1:]), ws, (i0, i1)


@dataclass(frozen=True, eq=False)
class Spectrum:
    eigenvalues: np.ndarray
    eigenfunctions: list
    sigma: GridFunction
    block: tuple

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[1])

    def coefficients(self, z) -> np.ndarray:
        """Trapezoid inner products ``a_j = <z, η_j>``."""
        z = z.values if isinstance(z, GridFunction) else np.asarray(z, dtype=float)
        w = np.asarray(self.sigma.grid.weights)
        return np.array([np.dot(w, z * e.values) for e in self.eigenfunctions])

    def evolve(self, coeffs, t: float) -> GridFunction:
        """``Σ a_j e^{-λ_j t} η_j`` for the leading coefficients given."""
        a = np.asarray(coeffs, dtype=float)
        out = np.zeros(self.sigma.grid.n)
        for aj, lj, ej in zip(a, self.eigenvalues, self.eigenfunctions):
            out += aj * np.exp(-lj * t) * ej.values
        return GridFunction(self.sigma.grid, out)


def eigensolve(sigma: GridFunction, k: int) -> Spectrum:
    """Lowest ``k+1`` eigenpairs, eigenfunctions normalized in the trapezoid norm."""
    g = sigma.grid
    if k < 1 or k > g.n // 4:
        raise ValueError("k must lie in [1, n/4]")
    diag, off, ws, (i0, i1) = _scaled_bands(sigma)
    if k + 1 > diag.size:
        raise ValueError("k exceeds the number of active nodes")
    try:
        lam, vec = eigh_tridiagonal(diag, off, select="i", select_range=(0, k))
    except np.linalg.LinAlgError as exc:
        raise KernelError(f"eigensolver did not converge: {exc}") from exc
    funcs = []
    for j in range(k + 1):
        v = np.zeros(g.n)
        v[i0:i1 + 1] = vec[:, j] / ws
        # fix the sign so eigenfunctions are reproducible
        if v[i0] < 0:
            v = -v
        funcs.append(GridFunction(g, v))
    w = np.asarray(g.weights)
    gram = np.array([[np.dot(w, a.values * b.values) for b in funcs] for a in funcs])
    if np.max(np.abs(gram - np.eye(k + 1))) > ORTHO_TOL:
        raise KernelError("eigenfunctions failed the orthonormality check")
    return Spectrum(lam, funcs, sigma, (i0, i1))


def rayleigh_lambda1(sigma: GridFunction) -> float:
    """Smallest eigenvalue of the pencil on mean-zero functions, by dense deflation.

    The constant mode ``W^{1/2} 1`` is removed with a full orthogonal basis
    of its complement; the result is independent of :func:`eigensolve`.
    """
    diag, off, ws, _ = _scaled_bands(sigma)
    n = diag.size
    c = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    v0 = ws / np.linalg.norm(ws)
    q, _ = np.linalg.qr(v0[:, None], mode="complete")
    z = q[:, 1:]
    return float(np.linalg.eigvalsh(z.T @ c @ z)[0]) if n > 1 else 0.0


def rayleigh_quotient(f, sigma: GridFunction) -> float:
    """``∫σ f'² / ∫f²`` with the discrete stencil, after removing the weighted mean."""
    f = f.values if isinstance(f, GridFunction) else np.asarray(f, dtype=float)
    w = np.asarray(sigma.grid.weights)
    f = f - np.dot(w, f) / np.sum(w)
    df = np.diff(f) / sigma.grid.dy
    num = float(np.sum(half_node_sigma(sigma) * df * df) * sigma.grid.dy)
    den = float(np.dot(w, f * f))
    if den <= 0:
        raise ValueError("test function is constant")
    return num / den


@dataclass(frozen=True, eq=False)
class FrozenTrajectory:
    """Tax and reference states under one set of frozen statistics.

    The reference starts at ``τ`` and takes the same steps, so the difference
    obeys the source-free equation even where ``τ`` is only stationary on the
    interior.
    """

    times: np.ndarray
    states: np.ndarray
    reference: np.ndarray
    stats: FrozenStatistics
    frozen: bool = True


def frozen_trajectory(T0: GridFunction, tau: GridFunction, stats, dt: float, n_steps: int,
                      n_substeps: int = 1) -> FrozenTrajectory:
    fs = FrozenStatistics.of(stats)
    T, R = T0, tau
    states, ref = [T.values.copy()], [R.values.copy()]
    for _ in range(n_steps):
        T = frozen_step(T, fs, dt, n_substeps)
        R = frozen_step(R, fs, dt, n_substeps)
        states.append(T.values.copy())
        ref.append(R.values.copy())
    return FrozenTrajectory(dt * np.arange(n_steps + 1), np.array(states), np.array(ref), fs)


def decay_certificate(trajectory, tau: GridFunction, lambda1: float, tol: float = 1e-9) -> float:
    """``min_t e^{-2λ₁t} D(0) - D(t)`` with ``D(t) = ∫(T(t) - τ(t))² dy``.

    The initial deviation must have zero weighted mean and vanish off the
    active block; the constant and cut-off modes do not decay.
    """
    if not getattr(trajectory, "frozen", False):
        raise ValueError("trajectory not frozen-mode")
    if not np.array_equal(trajectory.reference[0], tau.values):
        raise ValueError("trajectory reference does not start at tau")
    g = tau.grid
    w = np.asarray(g.weights)
    z = trajectory.states - trajectory.reference
    scale = max(float(np.max(np.abs(z[0]))), 1e-300)
    i0, i1 = active_block(trajectory.stats.sigma)
    off = np.ones(g.n, dtype=bool)
    off[i0:i1 + 1] = False
    if np.any(np.abs(z[0][off]) > tol * scale):
        raise ValueError("initial deviation does not vanish off the active block")
    if abs(np.dot(w, z[0])) > tol * scale * np.sum(w):
        raise ValueError("initial deviation has nonzero mean")
    d = (z * z) @ w
    return float(np.min(np.exp(-2.0 * lambda1 * trajectory.times) * d[0] - d))
