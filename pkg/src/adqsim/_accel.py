"""Backend selection for the hot kernels.

Set ``ADQSIM_NO_NUMBA=1`` to force the vectorised numpy path. Numba is used
otherwise whenever it imports cleanly.
"""
import os

_FLAG = os.environ.get("ADQSIM_NO_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not NUMBA_DISABLED


def njit(*args, **kws):
    """``numba.njit`` with the project's default options (cache, no fastmath)."""
    import numba

    kws.setdefault("cache", True)
    kws.setdefault("nogil", True)
    return numba.njit(*args, **kws)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
