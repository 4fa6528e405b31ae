"""Backend switch for the compiled kernels.

Set ``KPTRACK_BACKEND=numpy`` to force the pure-numpy fallbacks, or
``KPTRACK_BACKEND=numba`` to require numba. The default uses numba when
it imports and silently falls back otherwise.
"""

import os

_requested = os.environ.get("KPTRACK_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(f"KPTRACK_BACKEND must be auto, numba or numpy, got {_requested!r}")

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


if _requested == "numba" and not HAVE_NUMBA:
    raise ImportError("KPTRACK_BACKEND=numba but numba is not installed")

USE_NUMBA = HAVE_NUMBA and _requested != "numpy"
BACKEND = "numba" if USE_NUMBA else "numpy"
