"""numba switch.

Set ``STOCHMARGIN_DISABLE_NUMBA=1`` to force the pure-numpy kernels, e.g. for
debugging or on platforms without a working numba install.
"""
import os

_FLAG = os.environ.get("STOCHMARGIN_DISABLE_NUMBA", "0").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """``numba.njit`` with the package defaults, or the plain function when numba is off."""
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(cache=True, nogil=True, error_model="numpy")(fn)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
