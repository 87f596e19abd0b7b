"""Optional numba acceleration.

Hot per-pixel kernels ship in two flavours: an ``@njit`` loop version and a
vectorised numpy version.  The loop version is used when numba imports and
``PATCHGEO_DISABLE_NUMBA`` is unset (or ``0``).  Both paths must agree; the
test suite checks them against each other.
"""

import os

_flag = os.environ.get("PATCHGEO_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    from numba import njit as _numba_njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False
    _numba_njit = None


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, otherwise an identity decorator."""
    if HAVE_NUMBA:
        return _numba_njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(fn):
        return fn

    return wrap


def use_numba():
    return HAVE_NUMBA
