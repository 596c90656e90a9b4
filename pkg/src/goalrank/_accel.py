"""Backend switch for the compiled kernels.

Set ``GOALRANK_NUMBA=0`` before import to force the pure-numpy code paths.
Numba is used when it is importable and the flag is not disabled.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("GOALRANK_NUMBA", "1").strip().lower()

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, otherwise a no-op decorator.

    Kernels are always compiled when numba exists so both backends stay
    testable in one process; ``USE_NUMBA`` only selects the dispatch target.
    """
    if HAVE_NUMBA:
        import numba

        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
