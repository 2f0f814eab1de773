"""Kernel backend selection.

Hot numeric kernels ship in two versions: numba ``@njit`` loops and pure
numpy array code.  The active backend is chosen once at import time from the
``FLUXPRICE_BACKEND`` environment variable:

* ``numba``  -- require numba, raise if it cannot be imported
* ``numpy``  -- force the pure-numpy fallback
* unset / ``auto`` -- numba when importable, numpy otherwise

``benchmarks/bench_kernels.py`` compares the two paths.
"""

from __future__ import annotations

import os

_ENV_VAR = "FLUXPRICE_BACKEND"


def _resolve() -> tuple[str, bool]:
    choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"{_ENV_VAR} must be 'auto', 'numba' or 'numpy', got {choice!r}")
    if choice == "numpy":
        return "numpy", False
    try:
        import numba  # noqa: F401

        return "numba", True
    except ImportError:
        if choice == "numba":
            raise ImportError(f"{_ENV_VAR}=numba but numba is not importable")
        return "numpy", False


BACKEND, NUMBA_AVAILABLE = _resolve()


def using_numba() -> bool:
    return BACKEND == "numba"
