"""Optional numba acceleration.

Set ``SSMFLOW_NUMBA=0`` to run every kernel as plain Python/numpy. The
kernels are written so that both paths execute the same source.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_ENABLED = numba is not None and os.environ.get("SSMFLOW_NUMBA", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def maybe_njit(func):
    """Compile ``func`` with ``numba.njit(cache=True)`` when enabled.

    The undecorated function stays reachable as ``.py_func`` either way so
    benchmarks and tests can run both paths side by side.
    """
    if not NUMBA_ENABLED:
        func.py_func = func
        return func
    return numba.njit(cache=True)(func)
