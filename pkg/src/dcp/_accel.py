"""Optional numba acceleration.

Set ``DCP_DISABLE_NUMBA=1`` (or have numba missing) to run every kernel
through its pure-numpy fallback. The flag is read once at import time.
"""

import os

_FLAG = os.environ.get("DCP_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, the identity decorator otherwise."""
    if USE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda func: func


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
