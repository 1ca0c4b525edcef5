"""Backend switch for the compiled kernels.

Set ``LESIONFORGE_NO_NUMBA=1`` to force the pure-numpy code path. The flag is
read once at import time.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("LESIONFORGE_NO_NUMBA", "").strip().lower()
_DISABLED = _FLAG in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by LESIONFORGE_NO_NUMBA")
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:
    _njit = None
    HAS_NUMBA = False


def njit(func):
    """``numba.njit(cache=True)`` when available, otherwise ``None``.

    Callers keep the numpy twin around and pick it when this returns ``None``.
    """
    if _njit is None:
        return None
    return _njit(cache=True, nogil=True)(func)


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
