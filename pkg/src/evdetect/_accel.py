"""Numba switch for the hot kernels.

Every kernel in :mod:`evdetect.kernels` exists twice: a ``@njit`` loop
version and a vectorised numpy version. The loop versions are used unless
``EVDETECT_DISABLE_NUMBA`` is set to a truthy value in the environment, or
numba cannot be imported. Both paths produce the same numbers up to
floating-point summation order.
"""

import os
import warnings

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

_FALSY = {"", "0", "false", "no", "off"}

_enabled = numba is not None and (
    os.environ.get("EVDETECT_DISABLE_NUMBA", "").strip().lower() in _FALSY
)


def enabled():
    """Return True when the numba kernels are active."""
    return _enabled


def set_enabled(flag):
    """Switch kernel paths at runtime (tests and benchmarks)."""
    global _enabled
    if flag and numba is None:
        raise RuntimeError("numba is not installed")
    _enabled = bool(flag)


def njit(func):
    """``numba.njit(cache=True)`` when numba exists, identity otherwise."""
    if numba is None:
        return func
    return numba.njit(cache=True)(func)


def dispatch(nb_impl, np_impl):
    """Build a function that forwards to ``nb_impl`` or ``np_impl``."""

    def call(*args):
        if _enabled:
            return nb_impl(*args)
        return np_impl(*args)

    call.__name__ = np_impl.__name__.lstrip("_").replace("_np", "")
    call.__doc__ = np_impl.__doc__
    call.nb = nb_impl
    call.np = np_impl
    return call


def set_threads(n):
    """Pin BLAS and numba thread pools to ``n`` threads."""
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)
    if numba is not None:
        with warnings.catch_warnings():
            # numba probes TBB first and warns when the installed one is old
            warnings.simplefilter("ignore", numba.NumbaWarning)
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
