"""Kernel backend selection.

Hot loops ship in two flavours: a numba ``@njit`` version written as explicit
loops, and a vectorised numpy version. ``STOCHSENS_DISABLE_NUMBA=1`` (or a
missing numba install) selects the numpy path at import time.
"""

from __future__ import annotations

import os

ENV_FLAG = "STOCHSENS_DISABLE_NUMBA"

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get(ENV_FLAG, "0").strip().lower() not in ("1", "true", "yes")


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def select(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
