"""Backend selection for the compiled kernels.

Set ``MBLINGAM_DISABLE_NUMBA=1`` to force the pure-numpy code path. When numba
is not importable the numpy path is used automatically.
"""
import os

_FLAG = "MBLINGAM_DISABLE_NUMBA"


def _env_disabled():
    return os.environ.get(_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, otherwise an identity decorator.

    The decorated function is always compiled if numba is present, even when
    the env flag disables it, so that tests and benchmarks can compare both
    paths inside one process.
    """
    if HAVE_NUMBA:
        import numba

        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
