"""Backend selection for the hot kernels.

Every kernel in :mod:`sdcsim.kernels` exists twice: a scalar loop compiled
with numba and a vectorised pure-numpy twin. Both consume the same counter
based random streams, so they produce identical results; numba is only
faster. Set ``SDCSIM_DISABLE_NUMBA=1`` to force the numpy path.
"""

from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

ENV_FLAG = "SDCSIM_DISABLE_NUMBA"

HAVE_NUMBA = numba is not None


def _flag_set() -> bool:
    return os.environ.get(ENV_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not _flag_set()


def njit(fn):
    """Compile ``fn`` lazily with numba, or hand it back untouched."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True, error_model="numpy")(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def pick(nb_impl, np_impl, use_numba: bool | None = None):
    """Return the implementation for the active (or requested) backend."""
    if use_numba is None:
        use_numba = USE_NUMBA
    return nb_impl if (use_numba and HAVE_NUMBA) else np_impl
