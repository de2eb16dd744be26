"""Optional numba acceleration.

Hot kernels are written once as plain Python loops and compiled with numba
when it is importable and ``OCTUPLET_DISABLE_NUMBA`` is unset. Each kernel
module also carries a vectorised numpy path which is used when numba is off.
"""
import os

_FLAG = "OCTUPLET_DISABLE_NUMBA"


def _numba_requested():
    return os.environ.get(_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by " + _FLAG)
    import numba as _nb

    USE_NUMBA = True
except ImportError:
    _nb = None
    USE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, otherwise the identity decorator."""
    if not USE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return _nb.njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
