"""Numba switch.

Hot loops are written twice: a plain-loop version compiled with numba and a
vectorised numpy version. ``BEVFUSE_DISABLE_NUMBA=1`` (or numba missing)
selects the numpy path at import time. Both paths must return identical
results; the test suite checks that.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_flag = os.environ.get("BEVFUSE_DISABLE_NUMBA", "").strip().lower()
USE_NUMBA = numba is not None and _flag not in ("1", "true", "yes", "on")


def njit(fn):
    """Compile ``fn`` with numba when available, else return it untouched."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def pick(loop_impl, numpy_impl):
    return loop_impl if USE_NUMBA else numpy_impl
