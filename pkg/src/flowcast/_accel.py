"""Optional numba acceleration.

Hot kernels in :mod:`flowcast.kernels` come in two flavours: a numba
``@njit`` build and a pure-numpy twin.  Which one backs the public
dispatcher is decided once at import time:

* if numba is not installed, the numpy twins are used;
* if the environment variable ``FLOWCAST_NUMBA`` is set to ``0``,
  ``false``, ``off`` or ``no`` (case-insensitive), the numpy twins are
  used even when numba is available.

Kernels are compiled with ``cache=True`` so repeated runs skip JIT
compilation, and without ``fastmath`` so results are bitwise stable.
"""

from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False


def _env_wants_numba() -> bool:
    value = os.environ.get("FLOWCAST_NUMBA", "1").strip().lower()
    return value not in ("0", "false", "off", "no")


USE_NUMBA = HAVE_NUMBA and _env_wants_numba()


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise.

    The decorated numba build is only *used* when ``USE_NUMBA`` is true,
    but we keep compilation available either way so tests and benchmarks
    can exercise both paths explicitly.
    """
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]

    def wrap(fn):
        return fn

    return wrap
