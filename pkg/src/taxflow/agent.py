"""Individual labor supply under a nonlinear tax and the induced economy.

Each type θ maximizes ``θl - T(θl) - v(l)``.  Off-node tax values, marginal
rates and curvature come from the cubic interpolant of the gridded tax, so the
brute-force and first-order solvers optimize the same objective.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import AgentError, NonUniqueOptimum, SnapshotError
from .model import (Grid, GridFunction, Preferences, SkillModel, edge_cutoff,
                    cumulative_integral, tail_integral)

log = logging.getLogger(__name__)

_GOLD = 0.5 * (np.sqrt(5.0) - 1.0)
FOC_RTOL = 1e-6
MASS_DEFECT_MAX = 1e-3


def _labor_bounds(theta, grid):
    return grid.y_min / theta, grid.y_max / theta


def _utility(theta, l, T, prefs):
    y = theta * l
    return y - T(y) - prefs.v(l)


def _golden(f, a, b, iters=90):
    """Vectorized golden-section maximization of ``f`` on ``[a, b]``."""
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc >= fd  # keep the smaller point on ties
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - _GOLD * (b - a)
        d_new = a + _GOLD * (b - a)
        c, d = c_new, d_new
        fc, fd = f(c), f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def solve_labor_bruteforce(theta, T: GridFunction, prefs: Preferences, n_mesh: int = 4001,
                           tie_rtol: float = 1e-11):
    """Global maximizer of the individual problem by dense search.

    The labor mesh spans incomes inside the tax grid.  The best mesh cell is
    refined by golden section.  Any other local maximum whose refined utility
    comes within ``tie_rtol`` of the best raises :class:`NonUniqueOptimum`.
    Ties on the mesh resolve to the smallest labor.
    """
    scalar = np.ndim(theta) == 0
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    if np.any(th <= 0):
        raise AgentError("skill must be positive")
    grid = T.grid
    lo, hi = _labor_bounds(th, grid)
    s = np.linspace(0.0, 1.0, n_mesh)
    L = lo[:, None] + (hi - lo)[:, None] * s[None, :]
    U = _utility(th[:, None], L, T, prefs)
    k = np.argmax(U, axis=1)
    rows = np.arange(th.size)
    if np.any((k == 0) | (k == n_mesh - 1)):
        bad = th[(k == 0) | (k == n_mesh - 1)][0]
        raise AgentError(f"optimum for theta={bad:.6g} sits on the income-grid edge")
    a, b = L[rows, k - 1], L[rows, k + 1]
    l_best, u_best = _golden(lambda x: _utility(th, x, T, prefs), a, b)

    # other interior local maxima of the mesh profile
    locmax = np.zeros_like(U, dtype=bool)
    locmax[:, 1:-1] = (U[:, 1:-1] >= U[:, :-2]) & (U[:, 1:-1] >= U[:, 2:])
    idx = np.arange(n_mesh)[None, :]
    locmax &= np.abs(idx - k[:, None]) > 2
    scale = 1.0 + np.abs(u_best)
    near = locmax & (U >= (u_best - 1e-6 * scale)[:, None])
    for r, j in zip(*np.nonzero(near)):
        _, u_alt = _golden(lambda x: _utility(th[r], x, T, prefs), L[r, j - 1], L[r, j + 1])
        if u_alt >= u_best[r] - tie_rtol * scale[r]:
            raise NonUniqueOptimum(
                f"theta={th[r]:.6g}: labor {l_best[r]:.8g} and {L[r, j]:.8g} both attain the maximum")
    return float(l_best[0]) if scalar else l_best


def solve_labor_foc(theta, T: GridFunction, prefs: Preferences, verify: bool = True,
                    max_iter: int = 200):
    """Root of ``θ(1 - T'(θl)) = v'(l)`` by safeguarded Newton iteration.

    Seeded with the zero-tax solution ``l = θ^e0`` and bracketed by the labor
    range that keeps income on the tax grid.  With ``verify`` the result must
    agree with :func:`solve_labor_bruteforce` to ``1e-6`` relative.
    """
    scalar = np.ndim(theta) == 0
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    if np.any(th <= 0):
        raise AgentError("skill must be positive")
    grid = T.grid
    a, b = _labor_bounds(th, grid)

    def g(l):
        return th * (1.0 - T(th * l, 1)) - prefs.v1(l)

    ga, gb = g(a), g(b)
    bad = ~((ga > 0) & (gb < 0))
    if np.any(bad):
        raise AgentError(f"no sign change of the first-order condition for theta={th[bad][0]:.6g}")
    a, b = a.copy(), b.copy()
    x = np.clip(prefs.labor_zero_tax(th), a, b)
    x = np.where((x <= a) | (x >= b), 0.5 * (a + b), x)
    for _ in range(max_iter):
        gx = g(x)
        pos = gx > 0
        a = np.where(pos, x, a)
        b = np.where(pos, b, x)
        dg = -th * th * T(th * x, 2) - prefs.v2(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = x - gx / dg
        ok = (dg < 0) & (xn > a) & (xn < b)
        xn = np.where(ok, xn, 0.5 * (a + b))
        done = np.abs(xn - x) <= 4e-16 * x
        x = xn
        if np.all(done | (b - a <= 4e-16 * x)):
            break
    else:
        raise AgentError("first-order solver did not converge")
    if verify:
        ref = np.atleast_1d(solve_labor_bruteforce(th, T, prefs))
        gap = np.abs(x - ref) / ref
        if np.any(gap > FOC_RTOL):
            i = int(np.argmax(gap))
            raise AgentError(
                f"first-order root {x[i]:.10g} disagrees with global optimum {ref[i]:.10g} at theta={th[i]:.6g}")
    return float(x[0]) if scalar else x


def progressivity(T: GridFunction, grid: Grid | None = None) -> GridFunction:
    """Local rate of progressivity ``y T''(y) / (1 - T'(y))``."""
    grid = grid or T.grid
    y = np.asarray(grid.nodes)
    r = 1.0 - T(y, 1)
    if np.any(r <= 0):
        raise SnapshotError("retention rate 1 - T' is not positive")
    return GridFunction(grid, y * T(y, 2) / r)


@dataclass(frozen=True, eq=False)
class EconomySnapshot:
    """Sufficient statistics induced by one tax schedule at flow time ``t``."""

    tax: GridFunction
    prefs: Preferences
    skills: SkillModel
    grid: Grid
    t: float
    theta_nodes: np.ndarray
    labor: np.ndarray
    y_of_theta: np.ndarray
    h_theta: np.ndarray
    phi: GridFunction
    Phi: GridFunction
    tail: GridFunction
    eps: GridFunction
    p: GridFunction
    sigma: GridFunction
    interior: np.ndarray
    mass_defect: float
    sigma_taper: float = 0.02
    curvature_smoothing: float = 0.1
    meta: dict = field(default_factory=dict)

    @property
    def timestamp(self) -> float:
        return self.t


def build_snapshot(T: GridFunction, prefs: Preferences, skills: SkillModel, grid: Grid | None = None,
                   t: float = 0.0, n_theta: int = 801, sigma_taper: float = 0.02,
                   verify: bool = True, phi_floor: float = 1e-6,
                   curvature_smoothing: float = 0.1) -> EconomySnapshot:
    """Solve every skill node and push the skill density forward to incomes.

    ``phi_floor`` (relative to ``max φ``) and the untapered skill range define
    the ``interior`` mask where φ is bounded away from zero.  Curvature for
    p, ε and φ comes from :meth:`GridFunction.curvature` with
    ``curvature_smoothing``; labor choices use the interpolating spline.
    """
    grid = grid or T.grid
    if grid != T.grid:
        raise SnapshotError("tax lives on a different grid")
    theta = skills.nodes(n_theta)
    try:
        l = solve_labor_foc(theta, T, prefs, verify=verify)
    except AgentError as exc:
        raise SnapshotError(str(exc)) from exc
    y = theta * l
    if np.any(np.diff(y) <= 0):
        raise SnapshotError("income map y(theta) is not strictly increasing")
    r = 1.0 - T(y, 1)
    if np.any(r <= 0):
        raise SnapshotError("retention rate 1 - T' <= 0 at a chosen income")
    t2 = T.curvature(y, curvature_smoothing)
    e_theta = prefs.structural_elasticity(l)
    soc = theta * theta * t2 + prefs.v2(l)
    if np.any(1.0 + y * t2 / r * e_theta <= 0) or np.any(soc <= 0):
        raise SnapshotError("elasticity denominator 1 + p e is not positive")
    dy_dtheta = l + theta * (r - y * t2) / soc
    if np.any(dy_dtheta <= 0):
        raise SnapshotError("income map y(theta) is not strictly increasing")
    h = skills.density(theta)
    phi_theta = h / dy_dtheta

    # Change of variables evaluated at the income nodes: with iso-elastic
    # preferences y'(θ) = (1+e) y / (θ (1+p e)), so φ and ε share the factor
    # 1+p e and their product σ = e θ h / ((1+e) r) carries no curvature noise.
    yg = np.asarray(grid.nodes)
    inside = (yg >= y[0]) & (yg <= y[-1])
    e0 = prefs.e0
    ry = 1.0 - T(yg, 1)
    t2y = T.curvature(yg, curvature_smoothing)
    valid = ry > 0
    py = np.where(valid, yg * t2y / np.where(valid, ry, 1.0), 0.0)
    den = 1.0 + py * e0
    valid &= den > 0
    if np.any(~valid & inside):
        raise SnapshotError("retention rate or elasticity denominator degenerate on the income image")
    eps = np.where(valid, yg / np.where(valid, ry, 1.0) * e0 / np.where(valid, den, 1.0), 0.0)

    theta_y = PchipInterpolator(y, theta)(yg[inside])
    phi = np.zeros(grid.n)
    phi[inside] = skills.density(np.clip(theta_y, theta[0], theta[-1])) * theta_y * den[inside] / ((1.0 + e0) * yg[inside])
    mass = float(np.dot(grid.weights, phi))
    defect = abs(mass - 1.0)
    log.debug("snapshot t=%g raw density mass %.3e off unity", t, defect)
    if defect >= MASS_DEFECT_MAX:
        raise SnapshotError(f"density mass defect {defect:.3e} exceeds {MASS_DEFECT_MAX:g}; "
                            "refine the skill or income grid")
    phi_f = GridFunction(grid, phi / mass)
    Phi = cumulative_integral(phi_f)
    tail = tail_integral(phi_f)

    cut = edge_cutoff(grid, sigma_taper)
    sigma = eps * phi_f.values * cut

    y_lo = float(np.interp(skills.theta_min + skills.taper_width, theta, y))
    interior = (inside & (yg >= y_lo) & (cut >= 1.0)
                & (phi_f.values >= phi_floor * phi_f.values.max()) & (eps > 0))
    return EconomySnapshot(
        tax=T, prefs=prefs, skills=skills, grid=grid, t=float(t), theta_nodes=theta, labor=l,
        y_of_theta=y, h_theta=h, phi=phi_f, Phi=Phi, tail=tail, eps=GridFunction(grid, eps),
        p=GridFunction(grid, py), sigma=GridFunction(grid, sigma), interior=interior,
        mass_defect=defect, sigma_taper=sigma_taper, curvature_smoothing=curvature_smoothing,
        meta={"dy_dtheta": dy_dtheta, "phi_theta": phi_theta, "retention_theta": r},
    )
