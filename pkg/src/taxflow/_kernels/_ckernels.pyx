# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: tridiagonal solves, theta-scheme marching, reflected
Euler-Maruyama paths.  Mirrors ``_pykernels`` call for call."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor

cnp.import_array()


cdef void _thomas(const double[::1] a, const double[::1] b, const double[::1] c, const double[::1] d,
                  double[::1] cp, double[::1] x) noexcept nogil:
    cdef Py_ssize_t n = b.shape[0]
    cdef Py_ssize_t i
    cdef double m
    cp[0] = c[0] / b[0]
    x[0] = d[0] / b[0]
    for i in range(1, n):
        m = b[i] - a[i] * cp[i - 1]
        cp[i] = c[i] / m
        x[i] = (d[i] - a[i] * x[i - 1]) / m
    for i in range(n - 2, -1, -1):
        x[i] -= cp[i] * x[i + 1]


def tridiag_solve(lower, diag, upper, rhs):
    cdef const double[::1] a = np.ascontiguousarray(lower, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(diag, dtype=np.float64)
    cdef const double[::1] c = np.ascontiguousarray(upper, dtype=np.float64)
    cdef const double[::1] d = np.ascontiguousarray(rhs, dtype=np.float64)
    cdef Py_ssize_t n = b.shape[0]
    out = np.empty(n)
    cdef double[::1] x = out
    cdef double[::1] cp = np.empty(n)
    with nogil:
        _thomas(a, b, c, d, cp, x)
    return out


def theta_march(lower, diag, upper, u0, source, double dt, Py_ssize_t n_steps,
                double theta, bint record):
    cdef const double[::1] lo = np.ascontiguousarray(lower, dtype=np.float64)
    cdef const double[::1] di = np.ascontiguousarray(diag, dtype=np.float64)
    cdef const double[::1] up = np.ascontiguousarray(upper, dtype=np.float64)
    cdef const double[::1] src = np.ascontiguousarray(source, dtype=np.float64)
    cdef Py_ssize_t n = di.shape[0]
    cdef Py_ssize_t i, k
    cdef double ex = (1.0 - theta) * dt
    # implicit matrix (I - theta dt A), factorized once
    cdef double[::1] ia = np.empty(n)
    cdef double[::1] ib = np.empty(n)
    cdef double[::1] ic = np.empty(n)
    cdef double[::1] cp = np.empty(n)
    cdef double[::1] den = np.empty(n)
    cdef double[::1] rhs = np.empty(n)
    cdef double[::1] u = np.array(u0, dtype=np.float64)
    cdef double[::1] rec_row
    cdef double m
    for i in range(n):
        ia[i] = -theta * dt * lo[i]
        ib[i] = 1.0 - theta * dt * di[i]
        ic[i] = -theta * dt * up[i]
    cp[0] = ic[0] / ib[0]
    den[0] = ib[0]
    for i in range(1, n):
        den[i] = ib[i] - ia[i] * cp[i - 1]
        cp[i] = ic[i] / den[i]

    out = None
    cdef double[:, ::1] rec
    if record:
        out = np.empty((n_steps + 1, n))
        rec = out
        for i in range(n):
            rec[0, i] = u[i]
    with nogil:
        for k in range(n_steps):
            for i in range(n):
                rhs[i] = u[i] + ex * di[i] * u[i] + dt * src[i]
                if i > 0:
                    rhs[i] += ex * lo[i] * u[i - 1]
                if i < n - 1:
                    rhs[i] += ex * up[i] * u[i + 1]
            u[0] = rhs[0] / den[0]
            for i in range(1, n):
                u[i] = (rhs[i] - ia[i] * u[i - 1]) / den[i]
            for i in range(n - 2, -1, -1):
                u[i] -= cp[i] * u[i + 1]
            if record:
                for i in range(n):
                    rec[k + 1, i] = u[i]
    if record:
        return out
    return np.asarray(u)


cdef inline double _interp(double b, double y0, double dy, const double[::1] t) noexcept nogil:
    cdef Py_ssize_t n = t.shape[0]
    cdef double s = (b - y0) / dy
    cdef Py_ssize_t i = <Py_ssize_t>floor(s)
    if i < 0:
        i = 0
    elif i > n - 2:
        i = n - 2
    cdef double f = s - i
    return t[i] * (1.0 - f) + t[i + 1] * f


def em_reflected(double x0, normals, double dt, double y0, double dy,
                 sigma, dsigma, phi):
    cdef const double[:, ::1] z = np.ascontiguousarray(normals, dtype=np.float64)
    cdef const double[::1] sg = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef const double[::1] ds = np.ascontiguousarray(dsigma, dtype=np.float64)
    cdef const double[::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    cdef Py_ssize_t n_paths = z.shape[0]
    cdef Py_ssize_t n_sub = z.shape[1]
    cdef double lo = y0
    cdef double hi = y0 + dy * (sg.shape[0] - 1)
    b_out = np.empty(n_paths)
    acc_out = np.empty(n_paths)
    cdef double[::1] bo = b_out
    cdef double[::1] ao = acc_out
    cdef double sq = sqrt(dt)
    cdef double b, acc, s
    cdef Py_ssize_t p, k
    cdef bint escaped = False
    with nogil:
        for p in range(n_paths):
            b = x0
            acc = 0.5 * _interp(b, y0, dy, ph)
            for k in range(n_sub):
                s = _interp(b, y0, dy, sg)
                if s < 0.0:
                    s = 0.0
                b = b + _interp(b, y0, dy, ds) * dt + sqrt(2.0 * s) * sq * z[p, k]
                if b < lo:
                    b = 2.0 * lo - b
                if b > hi:
                    b = 2.0 * hi - b
                if k < n_sub - 1:
                    acc += _interp(b, y0, dy, ph)
            acc += 0.5 * _interp(b, y0, dy, ph)
            if b < lo or b > hi:
                escaped = True
            bo[p] = b
            ao[p] = acc * dt
    if escaped:
        raise RuntimeError("path escaped the grid after reflection")
    return b_out, acc_out
