"""Backend selection for the hot kernels.

Numba is used when importable unless ``LSEOPE_DISABLE_NUMBA`` is set to a
truthy value, in which case every kernel runs its pure-numpy twin.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}


def _env_disabled() -> bool:
    return os.environ.get("LSEOPE_DISABLE_NUMBA", "").strip().lower() not in _FALSY


try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        import numba

        return numba.njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
