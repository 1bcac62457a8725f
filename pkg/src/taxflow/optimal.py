"""Revenue-maximizing tax by damped fixed-point iteration on marginal rates."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .agent import EconomySnapshot, build_snapshot
from .errors import ConvergenceError, SnapshotError
from .model import Grid, GridFunction, Preferences, SkillModel, derivative

log = logging.getLogger(__name__)


@dataclass
class FixedPointReport:
    iterations: int
    history: list = field(default_factory=list)
    foc_residual: float = np.inf
    converged: bool = False
    top_rate: float = np.nan
    certified: bool = False


def interior_span(mask: np.ndarray) -> tuple[int, int]:
    """First and last index of a boolean mask, which must be one contiguous run."""
    idx = np.flatnonzero(mask)
    if idx.size < 3:
        raise SnapshotError("interior region has fewer than 3 nodes")
    if idx[-1] - idx[0] + 1 != idx.size:
        raise SnapshotError("interior region is not contiguous")
    return int(idx[0]), int(idx[-1])


def interior_compact(snapshot: EconomySnapshot, frac: float = 0.8) -> np.ndarray:
    """Mask of the central ``frac`` of the interior span.

    Tax values just inside the interior still feel the taper band, where the
    rates are continued rather than optimal; the compact stays clear of it.
    """
    lo, hi = interior_span(snapshot.interior)
    y = np.asarray(snapshot.grid.nodes)
    pad = 0.5 * (1.0 - frac) * (y[hi] - y[lo])
    return (y >= y[lo] + pad) & (y <= y[hi] - pad)


def continue_outside(m: np.ndarray, lo: int, hi: int, x: np.ndarray, x_bottom: float,
                     x_top: float) -> np.ndarray:
    """Fill ``m`` outside ``[lo, hi]`` (uniform coordinates ``x``).

    Below, the slope is a cubic Hermite blend from its interior value and
    curvature down to zero over ``[x_bottom, x[lo]]``, after which ``m`` is
    constant: a C² continuation.  A plain constant would leave jumps in T''
    whose spline reconstruction rings into the interior.  Above, ``m`` falls
    linearly to zero at ``x_top`` and is zero beyond.
    """
    m = np.array(m, dtype=float)
    h = x[1] - x[0]
    s = (-3 * m[lo] + 4 * m[lo + 1] - m[lo + 2]) / (2 * h)
    c = (2 * m[lo] - 5 * m[lo + 1] + 4 * m[lo + 2] - m[lo + 3]) / h ** 2
    d = max(x[lo] - x_bottom, 4 * h)
    u = np.clip(1.0 + (x[:lo] - x[lo]) / d, 0.0, 1.0)

    def prim(u):
        return s * (u ** 3 - 0.5 * u ** 4) + c * d * (0.25 * u ** 4 - u ** 3 / 3.0)

    m[:lo] = m[lo] - d * (prim(1.0) - prim(u))
    above = np.arange(x.size) > hi
    frac = np.clip((x_top - x) / max(x_top - x[hi], 1e-300), 0.0, 1.0)
    m[above] = m[hi] * frac[above]
    return m


def saez_update(snapshot: EconomySnapshot, retention_floor: float = 0.02,
                strict: bool = False) -> GridFunction:
    """Marginal rates ``(1 - Φ)/(ε φ)`` on the interior.

    Below the interior the rate is continued C²-smoothly to a constant; above it
    the rate falls linearly to zero at the top of the income image and stays
    zero beyond.  Rates are capped at ``1 - retention_floor``; with
    ``strict`` a binding cap on the interior raises.
    """
    lo, hi = interior_span(snapshot.interior)
    y = np.asarray(snapshot.grid.nodes)
    phi, eps, tail = snapshot.phi.values, snapshot.eps.values, snapshot.tail.values
    m = np.empty_like(y)
    sl = slice(lo, hi + 1)
    m[sl] = tail[sl] / (eps[sl] * phi[sl])
    m = continue_outside(m, lo, hi, y, snapshot.y_of_theta[0], snapshot.y_of_theta[-1])
    cap = 1.0 - retention_floor
    if strict and np.any(m[sl] > cap):
        raise ConvergenceError("retention floor binds on the interior")
    return GridFunction(snapshot.grid, np.minimum(m, cap))


def tax_from_marginal(m: GridFunction) -> GridFunction:
    """Trapezoid antiderivative of the marginal rates with ``T(y_min) = 0``."""
    g = m.grid
    v = m.values
    return GridFunction(g, np.concatenate(([0.0], np.cumsum(0.5 * g.dy * (v[1:] + v[:-1])))))


def foc_residual(T: GridFunction, snapshot: EconomySnapshot, shrink: int = 2) -> float:
    """``‖φ + d/dy(T' ε φ)‖∞ / ‖φ‖∞`` over the interior minus ``shrink`` nodes per side."""
    lo, hi = interior_span(snapshot.interior)
    flux = derivative(T) * snapshot.eps * snapshot.phi
    r = snapshot.phi.values + derivative(flux).values
    return float(np.max(np.abs(r[lo + shrink:hi - shrink + 1])) / snapshot.phi.sup())


def solve_optimal(skills: SkillModel, prefs: Preferences, grid: Grid, damping: float = 0.5,
                  tol: float = 1e-9, max_iter: int = 400, initial_rate: float = 0.1,
                  retention_floor: float = 0.02, n_theta: int = 801, sigma_taper: float = 0.02,
                  foc_tol: float = 1e-4, curvature_smoothing: float = 0.1):
    """Iterate ``T'_{k+1} = (1-λ) T'_k + λ saez(T_k)`` to a fixed point.

    Returns ``(T*, snapshot(T*), FixedPointReport)``.  The final snapshot is
    rebuilt with the brute-force oracle check enabled, and the report is
    ``certified`` when the relative interior FOC residual is below ``foc_tol``.
    """
    if not (0 < damping <= 1):
        raise ValueError("damping must lie in (0, 1]")
    m = GridFunction(grid, np.full(grid.n, float(initial_rate)))
    report = FixedPointReport(iterations=0)
    kw = dict(prefs=prefs, skills=skills, grid=grid, n_theta=n_theta, sigma_taper=sigma_taper,
              curvature_smoothing=curvature_smoothing)
    for k in range(1, max_iter + 1):
        T = tax_from_marginal(m)
        try:
            snap = build_snapshot(T, verify=False, **kw)
        except SnapshotError as exc:
            raise ConvergenceError(f"snapshot failed at iteration {k}: {exc}") from exc
        s = saez_update(snap, retention_floor)
        m_next = (1.0 - damping) * m + damping * s
        upd = float(np.max(np.abs(m_next.values - m.values)))
        report.history.append(upd)
        report.iterations = k
        m = m_next
        log.debug("fixed point iteration %d: update %.3e", k, upd)
        if upd < tol:
            report.converged = True
            break
    if not report.converged:
        raise ConvergenceError(f"fixed point not reached in {max_iter} iterations "
                               f"(last update {report.history[-1]:.3e})")
    T = tax_from_marginal(m)
    snap = build_snapshot(T, verify=True, **kw)
    saez_update(snap, retention_floor, strict=True)
    report.foc_residual = foc_residual(T, snap)
    report.top_rate = float(abs(T(snap.y_of_theta[-1], 1)))
    report.certified = report.foc_residual < foc_tol
    return T, snap, report


def diamond_check(T: GridFunction, skills: SkillModel, prefs: Preferences,
                  snapshot: EconomySnapshot, interior: float = 0.9) -> float:
    """Largest relative gap between ``T'/(1-T')`` and ``(1+1/e0)(1-F)/(θ f)``.

    Evaluated at the skill nodes in the central ``interior`` fraction of the
    untapered range ``[θ_min + w, θ_max - w]``; the taper band is where the
    marginal rate is continued rather than given by the formula.
    """
    th = snapshot.theta_nodes
    w = skills.taper_width
    a, b = skills.theta_min + w, skills.theta_max - w
    pad = 0.5 * (1.0 - interior) * (b - a)
    sel = (th >= a + pad) & (th <= b - pad)
    if np.count_nonzero(sel) < 3:
        raise ValueError("too few skill nodes in the untapered range")
    th_i = th[sel]
    tp = T(snapshot.y_of_theta[sel], 1)
    if np.any(tp >= 1.0):
        raise ValueError("marginal rate reaches 1")
    lhs = tp / (1.0 - tp)
    rhs = (1.0 + 1.0 / prefs.e0) * (1.0 - skills.cdf(th_i)) / (th_i * skills.density(th_i))
    return float(np.max(np.abs(lhs - rhs) / np.abs(rhs)))
