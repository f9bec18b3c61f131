"""Backend switch for the array kernels.

Set ``CISSBENCH_DISABLE_NUMBA=1`` to force the pure-numpy fallbacks, e.g. when
debugging or on platforms without an LLVM toolchain.
"""

import os

_FLAG = "CISSBENCH_DISABLE_NUMBA"


def _env_disabled() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


try:
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise a no-op decorator.

    The decorated function is compiled even if ``USE_NUMBA`` is off so the
    benchmark and the cross-check tests can still reach the compiled path.
    """
    if _njit is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
