"""Pure numpy/scipy implementations of the hot loops.

Used when the compiled extension is unavailable or when
``TAXFLOW_PURE_PYTHON=1`` is set.  Signatures match ``_ckernels`` exactly.
"""
import numpy as np
from scipy.linalg import solve_banded


def tridiag_solve(lower, diag, upper, rhs):
    """Solve a tridiagonal system.

    ``lower[i]`` multiplies ``x[i-1]`` in row ``i`` (``lower[0]`` unused) and
    ``upper[i]`` multiplies ``x[i+1]`` (``upper[-1]`` unused).
    """
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, rhs, check_finite=False)


def theta_march(lower, diag, upper, u0, source, dt, n_steps, theta, record):
    """Advance ``du/dt = A u + source`` with the theta scheme.

    ``A`` is tridiagonal with bands ``lower``/``diag``/``upper`` (same layout
    as :func:`tridiag_solve`).  ``theta=0.5`` is Crank-Nicolson, ``theta=1``
    backward Euler.  Returns the final state, or every state (shape
    ``(n_steps + 1, n)``) when ``record`` is true.
    """
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = -theta * dt * upper[:-1]
    ab[1] = 1.0 - theta * dt * diag
    ab[2, :-1] = -theta * dt * lower[1:]
    ex = (1.0 - theta) * dt
    u = np.array(u0, dtype=float)
    out = None
    if record:
        out = np.empty((n_steps + 1, n))
        out[0] = u
    for k in range(n_steps):
        rhs = u + ex * diag * u + dt * source
        rhs[1:] += ex * lower[1:] * u[:-1]
        rhs[:-1] += ex * upper[:-1] * u[1:]
        u = solve_banded((1, 1), ab, rhs, check_finite=False)
        if record:
            out[k + 1] = u
    return out if record else u


def _interp(b, y0, dy, table):
    n = table.shape[0]
    s = (b - y0) / dy
    i = np.clip(np.floor(s).astype(np.int64), 0, n - 2)
    f = s - i
    return table[i] * (1.0 - f) + table[i + 1] * f


def em_reflected(x0, normals, dt, y0, dy, sigma, dsigma, phi):
    """Euler-Maruyama paths of ``dB = sigma'(B) ds + sqrt(2 sigma(B)) dW``.

    Paths are reflected at the ends of the uniform grid described by ``y0``,
    ``dy`` and ``len(sigma)``.  ``normals`` has shape ``(n_paths, n_sub)``.
    Returns ``(B_end, int_phi)`` where ``int_phi`` is the trapezoid-in-time
    integral of ``phi(B_s)`` along each path.
    """
    n_paths, n_sub = normals.shape
    lo = y0
    hi = y0 + dy * (sigma.shape[0] - 1)
    b = np.full(n_paths, float(x0))
    acc = 0.5 * _interp(b, y0, dy, phi)
    sq = np.sqrt(dt)
    for k in range(n_sub):
        s = np.maximum(_interp(b, y0, dy, sigma), 0.0)
        b = b + _interp(b, y0, dy, dsigma) * dt + np.sqrt(2.0 * s) * sq * normals[:, k]
        b = np.where(b < lo, 2.0 * lo - b, b)
        b = np.where(b > hi, 2.0 * hi - b, b)
        if k < n_sub - 1:
            acc += _interp(b, y0, dy, phi)
    acc += 0.5 * _interp(b, y0, dy, phi)
    if np.any(b < lo) or np.any(b > hi):
        raise RuntimeError("path escaped the grid after reflection")
    return b, acc * dt
