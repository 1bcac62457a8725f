"""Time the compiled kernels against the numpy fallback.

Run ``python benchmarks/bench_kernels.py``; prints one line per kernel with
best-of-N wall time for each backend and the speedup.
"""
import argparse
import time

import numpy as np

from taxflow._kernels import _pykernels

try:
    from taxflow._kernels import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def march_case(n, steps):
    rng = np.random.default_rng(0)
    sig = 0.5 + rng.random(n)
    dy = 1.0 / (n - 1)
    sh = 2 * sig[:-1] * sig[1:] / (sig[:-1] + sig[1:]) / dy ** 2
    lower = np.zeros(n)
    upper = np.zeros(n)
    lower[1:] = sh
    upper[:-1] = sh
    lower[-1] *= 2
    upper[0] *= 2
    diag = -(lower + upper)
    u0 = np.exp(-((np.linspace(0, 1, n) - 0.5) / 0.05) ** 2)
    src = np.zeros(n)
    return lambda m: m.theta_march(lower, diag, upper, u0, src, 1e-5, steps, 0.5, False)


def em_case(paths, sub):
    n = 401
    rng = np.random.default_rng(1)
    z = rng.standard_normal((paths, sub))
    sig = np.full(n, 0.5)
    dsig = np.zeros(n)
    phi = np.ones(n)
    return lambda m: m.em_reflected(0.5, z, 1e-5, 0.0, 1.0 / (n - 1), sig, dsig, phi)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    cases = [
        ("theta_march n=801 steps=2000", march_case(801, 2000)),
        ("em_reflected paths=4096 sub=20", em_case(4096, 20)),
    ]
    for name, case in cases:
        tp = best_of(lambda: case(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:34s} python {tp * 1e3:9.2f} ms   cython (not built)")
            continue
        np.testing.assert_allclose(case(_ckernels), case(_pykernels), rtol=1e-10, atol=1e-12)
        tc = best_of(lambda: case(_ckernels), args.repeat)
        print(f"{name:34s} python {tp * 1e3:9.2f} ms   cython {tc * 1e3:9.2f} ms   x{tp / tc:6.1f}")


if __name__ == "__main__":
    main()
