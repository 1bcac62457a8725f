"""Heat-kernel invariance of the optimal tax and of its marginal rates.

For a source ``x`` the check compares ``T(x)`` with the accumulated mechanical
term ``∫_0^t ∫ q_s(x,y) φ(y) dy ds`` plus the kernel average ``∫ q_t(x,y) T(y) dy``.
The time integral runs over the kernel solver's own substeps with the rule
matching each substep (trapezoid for Crank-Nicolson, right endpoint for
backward Euler), so the quadrature error matches the kernel error.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .agent import EconomySnapshot
from .errors import KernelError
from .heatkernel import HeatKernelSolution, solve_kernel
from .model import GridFunction, derivative


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TAXFLOW_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


@dataclass
class FairnessReport:
    probes: list
    times: list
    residuals: np.ndarray
    derivative_residuals: np.ndarray
    mechanical: np.ndarray
    averaging: np.ndarray
    tax_sup: float
    marginal_sup: float
    meta: dict = field(default_factory=dict)

    def relative(self) -> np.ndarray:
        return self.residuals / self.tax_sup

    def derivative_relative(self) -> np.ndarray:
        return self.derivative_residuals / self.marginal_sup

    def to_dict(self) -> dict:
        return {
            "probes": [float(x) for x in self.probes],
            "times": [float(t) for t in self.times],
            "residuals": self.residuals.tolist(),
            "derivative_residuals": self.derivative_residuals.tolist(),
            "mechanical": self.mechanical.tolist(),
            "averaging": self.averaging.tolist(),
            "tax_sup": self.tax_sup,
            "marginal_sup": self.marginal_sup,
            "max_relative_residual": float(np.max(self.relative())),
            "max_relative_derivative_residual": float(np.max(self.derivative_relative())),
            **self.meta,
        }


def _check_sigma(kernel: HeatKernelSolution, snapshot: EconomySnapshot):
    if kernel.sigma.grid != snapshot.grid or not np.array_equal(kernel.sigma.values, snapshot.sigma.values):
        raise KernelError("kernel was not solved with the snapshot's conductivity")


def time_weights(kernel: HeatKernelSolution, t: float) -> np.ndarray:
    """Quadrature weights over the recorded states for ``∫_0^t f(s) ds``."""
    k_end = kernel.state_index(t)
    w = np.zeros(kernel.states.shape[0])
    prev = 0.0
    for k in range(k_end):
        dt = kernel.step_times[k] - prev
        prev = kernel.step_times[k]
        if kernel.thetas[k] == 1.0:
            w[k + 1] += dt
        else:
            w[k] += 0.5 * dt
            w[k + 1] += 0.5 * dt
    return w


def invariance_terms(T: GridFunction, snapshot: EconomySnapshot, kernel: HeatKernelSolution, t: float):
    """``(mechanical, averaging)`` terms for the source of ``kernel`` at time ``t``."""
    _check_sigma(kernel, snapshot)
    wy = np.asarray(snapshot.grid.weights)
    k = kernel.state_index(t)
    phi_int = kernel.states @ (wy * snapshot.phi.values)
    mech = float(np.dot(time_weights(kernel, t), phi_int))
    avg = float(np.dot(wy, kernel.states[k] * T.values))
    return mech, avg


def fairness_residual(T: GridFunction, snapshot: EconomySnapshot, kernel: HeatKernelSolution,
                      t: float) -> float:
    """``|T(x) - mechanical - averaging|`` at the kernel's source."""
    mech, avg = invariance_terms(T, snapshot, kernel, t)
    return abs(T.values[kernel.source_index] - mech - avg)


def _neighbour_kernels(snapshot, x, times, dt, n_startup):
    g = snapshot.grid
    i = g.index_of(x)
    if snapshot.sigma.values[i - 1] <= 0 or snapshot.sigma.values[i + 1] <= 0 or i < 2 or i > g.n - 3:
        raise KernelError("probe too close to the taper region for the source-difference stencil")
    return [solve_kernel(snapshot.sigma, float(g.nodes[j]), times, dt, n_startup) for j in (i - 1, i + 1)]


def marginal_fairness_residual(T: GridFunction, snapshot: EconomySnapshot, x: float, t: float,
                               kernels=None, dt: float | None = None, n_startup: int = 4) -> float:
    """Differentiated invariance at ``x``: source derivative by central differences.

    ``kernels`` may pass the two neighbouring-source solutions to reuse them.
    """
    g = snapshot.grid
    i = g.index_of(x)
    km, kp = kernels or _neighbour_kernels(snapshot, x, [t], dt, n_startup)
    mm, am = invariance_terms(T, snapshot, km, t)
    mp, ap = invariance_terms(T, snapshot, kp, t)
    rhs = ((mp + ap) - (mm + am)) / (2 * g.dy)
    return abs(derivative(T).values[i] - rhs)


def fairness_suite(T: GridFunction, snapshot: EconomySnapshot, probes, times,
                   dt: float | None = None, n_startup: int = 4) -> FairnessReport:
    """Invariance and marginal-invariance residuals over a probe × time lattice."""
    g = snapshot.grid
    probes = [float(g.nodes[g.index_of(x)]) for x in probes]
    times = sorted(float(t) for t in times)

    def one(x):
        k0 = solve_kernel(snapshot.sigma, x, times, dt, n_startup)
        kn = _neighbour_kernels(snapshot, x, times, dt, n_startup)
        row, drow, mrow, arow = [], [], [], []
        for t in times:
            mech, avg = invariance_terms(T, snapshot, k0, t)
            row.append(abs(T.values[k0.source_index] - mech - avg))
            mrow.append(mech)
            arow.append(avg)
            drow.append(marginal_fairness_residual(T, snapshot, x, t, kernels=kn))
        return row, drow, mrow, arow

    with ThreadPoolExecutor(max_workers=_threads()) as ex:
        rows = list(ex.map(one, probes))
    res = np.array([r[0] for r in rows])
    dres = np.array([r[1] for r in rows])
    mech = np.array([r[2] for r in rows])
    avg = np.array([r[3] for r in rows])
    return FairnessReport(probes, times, res, dres, mech, avg, T.sup(), derivative(T).sup())
