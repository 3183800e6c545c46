"""Switch between numba-compiled kernels and pure-numpy fallbacks.

Set ``GAGE_DISABLE_NUMBA=1`` in the environment before importing ``gage`` to
force the numpy path (useful for debugging and for the kernel benchmark).
"""
import os

_FLAG = os.environ.get("GAGE_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_ENABLED = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` with caching on; identity decorator when numba is absent."""
    kwargs.setdefault("cache", True)
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)


def select(compiled, fallback):
    """Return the compiled kernel when numba is enabled, else the fallback."""
    return compiled if NUMBA_ENABLED else fallback
