"""Revenue functional, its directional derivative and the steepest-ascent direction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agent import EconomySnapshot, build_snapshot
from .errors import SnapshotError
from .model import GridFunction, derivative, integrate


@dataclass(frozen=True)
class ReformDirection:
    """A direction of tax reform ``T̂`` with a human-readable label."""

    values: GridFunction
    label: str = ""


def _as_gf(d):
    return d.values if isinstance(d, ReformDirection) else d


def _theta_weights(snapshot: EconomySnapshot) -> np.ndarray:
    th = snapshot.theta_nodes
    w = np.full(th.size, th[1] - th[0])
    w[0] = w[-1] = 0.5 * (th[1] - th[0])
    w = w * snapshot.h_theta
    return w / w.sum()


def _check_pair(T: GridFunction, snapshot: EconomySnapshot):
    if T is snapshot.tax:
        return
    if T.grid != snapshot.tax.grid or not np.array_equal(T.values, snapshot.tax.values):
        raise SnapshotError(f"snapshot (t={snapshot.t:g}) was not built from this tax")


def revenue(T: GridFunction, snapshot: EconomySnapshot) -> float:
    """``∫ T(y(θ)) dH(θ)`` by trapezoid quadrature over the skill nodes.

    The skill weights are normalized to unit mass, so a lump-sum tax ``c``
    returns exactly ``c``.
    """
    _check_pair(T, snapshot)
    return float(np.dot(_theta_weights(snapshot), T(snapshot.y_of_theta)))


def gateaux(T: GridFunction, T_hat, snapshot: EconomySnapshot) -> float:
    """Directional derivative ``∫ T̂ φ dy - ∫ T' ε T̂' φ dy`` on the income grid."""
    _check_pair(T, snapshot)
    Th = _as_gf(T_hat)
    phi = snapshot.phi
    mech = integrate(Th * phi)
    behav = integrate(derivative(T) * snapshot.eps * derivative(Th) * phi)
    return mech - behav


def gateaux_fd_oracle(T: GridFunction, T_hat, mu: float, snapshot: EconomySnapshot,
                      verify: bool = True) -> float:
    """Central difference quotient of revenue in the reform size ``mu``.

    Both perturbed taxes get freshly solved snapshots that reuse the
    discretization of ``snapshot``.
    """
    Th = _as_gf(T_hat)
    kw = dict(prefs=snapshot.prefs, skills=snapshot.skills, grid=snapshot.grid,
              n_theta=snapshot.theta_nodes.size, sigma_taper=snapshot.sigma_taper,
              curvature_smoothing=snapshot.curvature_smoothing, verify=verify)
    Tp = T + mu * Th
    Tm = T - mu * Th
    rp = revenue(Tp, build_snapshot(Tp, t=snapshot.t, **kw))
    rm = revenue(Tm, build_snapshot(Tm, t=snapshot.t, **kw))
    return (rp - rm) / (2.0 * mu)


def steepest_direction(snapshot: EconomySnapshot, T: GridFunction) -> GridFunction:
    """``Λ = φ + d/dy (T' ε φ)``, the L² representer of the directional derivative."""
    _check_pair(T, snapshot)
    flux = derivative(T) * snapshot.eps * snapshot.phi
    return snapshot.phi + derivative(flux)
