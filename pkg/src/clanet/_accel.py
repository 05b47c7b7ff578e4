"""Switch between numba-compiled kernels and their pure-numpy fallbacks.

Set ``CLANET_DISABLE_NUMBA=1`` to force the numpy path even when numba is
installed. The choice is made once, at import time.
"""
from __future__ import annotations

import os

try:
    import numba  # noqa: F401
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def _env_disabled() -> bool:
    return os.environ.get("CLANET_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAS_NUMBA and not _env_disabled()


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


__all__ = ["HAS_NUMBA", "USE_NUMBA", "backend", "njit"]
