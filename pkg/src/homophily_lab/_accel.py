"""Numba switch.

Hot kernels are written twice: a plain numpy version and an ``@njit`` loop
version. ``HOMOPHILY_LAB_NUMBA=0`` forces the numpy path; otherwise numba is
used whenever it imports cleanly. Both paths must return bit-identical
results, which the test-suite checks directly.
"""
import os

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _flag_enabled():
    value = os.environ.get("HOMOPHILY_LAB_NUMBA", "1").strip().lower()
    return value not in ("0", "false", "no", "off")


USE_NUMBA = HAS_NUMBA and _flag_enabled()


def njit(*args, **kwargs):
    """``numba.njit`` with cache/nogil defaults, or identity without numba."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if not HAS_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def thread_cap():
    """Worker count from ``HOMOPHILY_LAB_THREADS`` (defaults to CPU count)."""
    raw = os.environ.get("HOMOPHILY_LAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)
