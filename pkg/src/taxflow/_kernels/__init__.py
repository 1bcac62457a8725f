"""Hot numerical kernels.

The compiled extension ``_ckernels`` is preferred; the numpy/scipy module
``_pykernels`` is the fallback.  Set ``TAXFLOW_PURE_PYTHON=1`` to force the
fallback (the benchmark and the backend-parity tests use this switch).
"""
import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("TAXFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

tridiag_solve = _impl.tridiag_solve
theta_march = _impl.theta_march
em_reflected = _impl.em_reflected

__all__ = ["BACKEND", "tridiag_solve", "theta_march", "em_reflected"]
