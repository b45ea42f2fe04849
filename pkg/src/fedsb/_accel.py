"""Numba switch.

Set ``FEDSB_DISABLE_JIT=1`` to run every kernel through its numpy path.
The switch is read once, at import time.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

JIT_DISABLED = os.environ.get("FEDSB_DISABLE_JIT", "0").lower() in ("1", "true", "yes")
HAVE_NUMBA = numba is not None
USE_JIT = HAVE_NUMBA and not JIT_DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise identity.

    Always compiles when numba is importable so that the jitted variants stay
    callable for parity tests and the benchmark; dispatch is decided by
    :data:`USE_JIT` in :mod:`fedsb.kernels`.
    """
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)
