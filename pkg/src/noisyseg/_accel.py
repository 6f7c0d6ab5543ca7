"""Backend selection for the hot kernels.

Set ``NOISYSEG_BACKEND=numpy`` to force the pure-numpy path; the default is
numba when it can be imported.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None

# reassociation is required for the reductions to vectorize; nnan/ninf stay off
FASTMATH = {"reassoc", "contract", "nsz", "arcp"}


def _requested_backend() -> str:
    value = os.environ.get("NOISYSEG_BACKEND", "numba").strip().lower()
    if value not in ("numba", "numpy"):
        raise ValueError(f"NOISYSEG_BACKEND must be 'numba' or 'numpy', got {value!r}")
    return value


BACKEND = _requested_backend() if HAVE_NUMBA else "numpy"


def use_numba() -> bool:
    return BACKEND == "numba"


def njit(func=None, *, fastmath=True):
    """Compile ``func`` with numba if available, otherwise return it unchanged.

    ``fastmath=False`` keeps strict IEEE semantics for kernels whose results
    must be exactly reproducible by the numpy path.
    """
    if func is None:
        return lambda f: njit(f, fastmath=fastmath)
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, fastmath=FASTMATH if fastmath else False, nogil=True)(func)
