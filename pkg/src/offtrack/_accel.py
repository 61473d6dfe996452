"""Optional numba acceleration.

Hot kernels are written once in a numba-compatible subset of numpy and
decorated with :func:`maybe_njit`. Setting ``OFFTRACK_DISABLE_NUMBA=1`` (or
running without numba installed) leaves them as plain Python/numpy
functions, which is the reference path the tests compare against.
"""

import os

_FLAG = "OFFTRACK_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


try:  # pragma: no cover - depends on the environment
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

USE_NUMBA = _numba is not None and _numba_requested()


def maybe_njit(*args, **kwargs):
    """``numba.njit`` when acceleration is enabled, identity otherwise.

    Works both bare (``@maybe_njit``) and with options
    (``@maybe_njit(cache=True)``).
    """
    if args and callable(args[0]) and len(args) == 1 and not kwargs:
        fn = args[0]
        return _numba.njit(cache=True)(fn) if USE_NUMBA else fn

    def deco(fn):
        if not USE_NUMBA:
            return fn
        opts = {"cache": True}
        opts.update(kwargs)
        return _numba.njit(**opts)(fn)

    return deco


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
