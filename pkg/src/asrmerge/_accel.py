"""Numba availability switch.

Set ``ASRMERGE_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable.
"""

import os

_DISABLED = os.environ.get("ASRMERGE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by ASRMERGE_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        # bare @njit or @njit(...) both degrade to the identity decorator
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


USE_NUMBA = HAVE_NUMBA
