"""Grids, sampled functions, quadrature/differencing rules and the exogenous
skill and preference model."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate as _spi
from scipy.interpolate import CubicSpline, make_smoothing_spline

from .errors import DomainError, GridError

MIN_NODES = 16


@dataclass(frozen=True)
class Grid:
    """Uniform income mesh on ``[y_min, y_max]`` with ``n`` nodes."""

    y_min: float
    y_max: float
    n: int

    def __post_init__(self):
        if not (math.isfinite(self.y_min) and math.isfinite(self.y_max)):
            raise GridError("grid bounds must be finite")
        if self.y_min <= 0:
            raise GridError(f"grid.y_min must be > 0, got {self.y_min}")
        if self.y_max <= self.y_min:
            raise GridError("grid.y_max must exceed grid.y_min")
        if int(self.n) != self.n or self.n < MIN_NODES:
            raise GridError(f"grid.n below minimum {MIN_NODES}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / (self.n - 1)

    @property
    def span(self) -> float:
        return self.y_max - self.y_min

    @cached_property
    def nodes(self) -> np.ndarray:
        y = np.linspace(self.y_min, self.y_max, self.n)
        y.flags.writeable = False
        return y

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights."""
        w = np.full(self.n, self.dy)
        w[0] = w[-1] = 0.5 * self.dy
        w.flags.writeable = False
        return w

    def index_of(self, y: float) -> int:
        """Index of the node nearest to ``y``."""
        return int(np.clip(round((y - self.y_min) / self.dy), 0, self.n - 1))

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.y_min, self.y_max, factor * (self.n - 1) + 1)


class GridFunction:
    """A real function sampled at the nodes of a :class:`Grid`.

    Values are copied and frozen; non-finite samples are rejected.
    """

    __slots__ = ("grid", "values", "__dict__")

    def __init__(self, grid: Grid, values):
        v = np.array(values, dtype=float)
        if v.ndim == 0:
            v = np.full(grid.n, float(v))
        if v.shape != (grid.n,):
            raise GridError(f"expected {grid.n} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GridError("grid function has non-finite values")
        v.flags.writeable = False
        self.grid = grid
        self.values = v

    @classmethod
    def from_callable(cls, grid: Grid, f) -> "GridFunction":
        return cls(grid, f(np.asarray(grid.nodes)))

    def __len__(self):
        return self.grid.n

    def __repr__(self):
        return f"GridFunction(n={self.grid.n}, min={self.values.min():.4g}, max={self.values.max():.4g})"

    def _coerce(self, other):
        if isinstance(other, GridFunction):
            if other.grid != self.grid:
                raise GridError("grid functions live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - self._coerce(other))

    def __mul__(self, other):
        return GridFunction(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.grid, -self.values)

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    @cached_property
    def spline(self) -> CubicSpline:
        """Cubic interpolant used wherever off-node values or curvature are needed."""
        return CubicSpline(self.grid.nodes, self.values)

    def __call__(self, y, nu: int = 0):
        return self.spline(y, nu)

    def curvature(self, y, smoothing: float = 0.0):
        """Second derivative, optionally from a penalized smoothing spline.

        ``smoothing = c`` sets the penalty ``c Δy³`` on ``∫ f''²``, which damps a
        Fourier mode of wavenumber ``k`` by ``1/(1 + c (k Δy)⁴)``; grid-scale
        modes are cut by ``1/(1 + c π⁴)`` while smooth features are untouched.
        ``c = 0`` uses the interpolating cubic spline.
        """
        if smoothing <= 0:
            return self.spline(y, 2)
        cache = self.__dict__.setdefault("_smooth", {})
        sp = cache.get(smoothing)
        if sp is None:
            sp = make_smoothing_spline(np.asarray(self.grid.nodes), self.values,
                                       lam=smoothing * self.grid.dy ** 3)
            cache[smoothing] = sp
        return sp(y, 2)


def derivative(f: GridFunction) -> GridFunction:
    """Second-order finite-difference derivative.

    Central differences in the interior, one-sided three-point stencils at the
    two ends.  Exact for quadratics.
    """
    v = f.values
    if v.shape[0] < 3:
        raise GridError("derivative needs at least 3 nodes")
    h = f.grid.dy
    d = np.empty_like(v)
    d[1:-1] = (v[2:] - v[:-2]) / (2 * h)
    # written in differences so constants give exactly zero
    d[0] = (4 * (v[1] - v[0]) - (v[2] - v[0])) / (2 * h)
    d[-1] = (4 * (v[-1] - v[-2]) - (v[-1] - v[-3])) / (2 * h)
    return GridFunction(f.grid, d)


def second_derivative(f: GridFunction) -> GridFunction:
    """Three-point second difference, second-order one-sided at the ends."""
    v = f.values
    if v.shape[0] < 4:
        raise GridError("second_derivative needs at least 4 nodes")
    h2 = f.grid.dy ** 2
    d = np.empty_like(v)
    d[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h2
    d[0] = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / h2
    d[-1] = (2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]) / h2
    return GridFunction(f.grid, d)


def integrate(f: GridFunction) -> float:
    """Composite trapezoid rule over the whole grid."""
    return float(np.dot(f.grid.weights, f.values))


def cumulative_integral(f: GridFunction) -> GridFunction:
    """Running trapezoid integral from ``y_min``; zero at the first node."""
    v = f.values
    c = np.concatenate(([0.0], np.cumsum(0.5 * f.grid.dy * (v[1:] + v[:-1]))))
    return GridFunction(f.grid, c)


def tail_integral(f: GridFunction) -> GridFunction:
    """Running trapezoid integral from each node up to ``y_max``; zero at the top."""
    v = f.values
    seg = 0.5 * f.grid.dy * (v[1:] + v[:-1])
    c = np.concatenate((np.cumsum(seg[::-1])[::-1], [0.0]))
    return GridFunction(f.grid, c)


def cosine_ramp(u):
    """C² ramp from 0 (u<=0) to 1 (u>=1): ``u - sin(2πu)/(2π)``.

    First and second derivatives vanish at both ends, so the ramp glues
    C²-smoothly onto the constants 0 and 1.
    """
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    return u - np.sin(2 * np.pi * u) / (2 * np.pi)


def edge_cutoff(grid: Grid, frac: float) -> np.ndarray:
    """C² cutoff vanishing at both grid ends and equal to 1 beyond ``frac`` of the span."""
    if frac <= 0:
        return np.ones(grid.n)
    y = np.asarray(grid.nodes)
    w = frac * grid.span
    return cosine_ramp((y - grid.y_min) / w) * cosine_ramp((grid.y_max - y) / w)


@dataclass(frozen=True)
class Preferences:
    """Iso-elastic disutility of labor ``v(l) = l^(1+1/e0) / (1+1/e0)``."""

    e0: float

    def __post_init__(self):
        if not (self.e0 > 0 and math.isfinite(self.e0)):
            raise DomainError(f"structural elasticity e0 must be > 0, got {self.e0}")

    def v(self, l):
        k = 1.0 + 1.0 / self.e0
        return np.power(l, k) / k

    def v1(self, l):
        return np.power(l, 1.0 / self.e0)

    def v2(self, l):
        return np.power(l, 1.0 / self.e0 - 1.0) / self.e0

    def structural_elasticity(self, l):
        """``e = v'/(l v'')``; identically ``e0`` for this family."""
        l = np.asarray(l, dtype=float)
        return self.v1(l) / (l * self.v2(l))

    def labor_zero_tax(self, theta):
        """Closed-form optimum without taxes: ``l = theta^e0``."""
        return np.power(theta, self.e0)


@dataclass(frozen=True)
class SkillModel:
    """Tapered lognormal skill density on ``[theta_min, theta_max]``.

    ``h(θ) ∝ LN(θ; location, scale) · ramp((θ-θmin)/w) · ramp((θmax-θ)/w)``
    with ``w = taper * (theta_max - theta_min)`` and the C² :func:`cosine_ramp`.
    """

    theta_min: float = 1.0
    theta_max: float = 3.0
    location: float = math.log(1.2)
    scale: float = 0.4
    taper: float = 0.25
    family: str = "tapered_lognormal"

    def __post_init__(self):
        if self.family != "tapered_lognormal":
            raise DomainError(f"unknown skill density family {self.family!r}")
        if not (0 < self.theta_min < self.theta_max):
            raise DomainError("need 0 < theta_min < theta_max")
        if not self.scale > 0:
            raise DomainError("lognormal scale must be > 0")
        if not (0 < self.taper <= 0.5):
            raise DomainError("taper must lie in (0, 0.5]")

    @property
    def taper_width(self) -> float:
        return self.taper * (self.theta_max - self.theta_min)

    def _unnormalized(self, theta):
        theta = np.asarray(theta, dtype=float)
        z = (np.log(theta) - self.location) / self.scale
        ln = np.exp(-0.5 * z * z) / (theta * self.scale * math.sqrt(2 * math.pi))
        w = self.taper_width
        return ln * cosine_ramp((theta - self.theta_min) / w) * cosine_ramp((self.theta_max - theta) / w)

    @cached_property
    def normalization(self) -> float:
        w = self.taper_width
        pts = [self.theta_min + w, self.theta_max - w]
        z, _ = _spi.quad(self._unnormalized, self.theta_min, self.theta_max,
                         points=pts, epsabs=1e-15, epsrel=1e-13, limit=400)
        return z

    def density(self, theta):
        """Skill density ``h(θ)``; raises outside the support."""
        theta = np.asarray(theta, dtype=float)
        tol = 1e-12 * (self.theta_max - self.theta_min)
        if np.any(theta < self.theta_min - tol) or np.any(theta > self.theta_max + tol):
            raise DomainError("theta outside the skill support")
        theta = np.clip(theta, self.theta_min, self.theta_max)
        return self._unnormalized(theta) / self.normalization

    def cdf(self, theta):
        """``H(θ)`` by adaptive quadrature between consecutive sorted points."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        order = np.argsort(theta)
        ts = np.clip(theta[order], self.theta_min, self.theta_max)
        out = np.empty_like(ts)
        acc, prev = 0.0, self.theta_min
        for i, t in enumerate(ts):
            if t > prev:
                part, _ = _spi.quad(self._unnormalized, prev, t, epsabs=1e-16, epsrel=1e-12, limit=200)
                acc += part
                prev = t
            out[i] = acc
        res = np.empty_like(out)
        res[order] = np.minimum(out / self.normalization, 1.0)
        return res

    def nodes(self, n_theta: int) -> np.ndarray:
        if n_theta < 3:
            raise GridError("need at least 3 skill nodes")
        return np.linspace(self.theta_min, self.theta_max, n_theta)
