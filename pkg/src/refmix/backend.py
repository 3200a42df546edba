"""Kernel backend selection.

Two interchangeable kernel sets exist: numba-compiled loops (default, and
the one that guarantees row-major left-to-right summation in ``matmul``)
and a pure-numpy fallback. Selection order:

1. ``REFMIX_KERNELS`` environment variable (``numba`` or ``numpy``),
2. numba if it imports, numpy otherwise.

``set_backend`` switches at runtime (used by tests and the kernel
benchmark). Within one backend every kernel is deterministic: identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

import os

from . import _kernels_numpy
from .errors import ConfigError

_ENV_VAR = "REFMIX_KERNELS"
_VALID = ("numba", "numpy")

_impl = None
_name = None


def _load(name: str):
    if name == "numpy":
        return _kernels_numpy
    from . import _kernels_numba

    return _kernels_numba


def _initial_name() -> str:
    env = os.environ.get(_ENV_VAR)
    if env:
        if env not in _VALID:
            raise ConfigError(
                f"{_ENV_VAR}={env!r} is not a valid backend; expected one of {_VALID}"
            )
        return env
    try:
        import numba  # noqa: F401
    except ImportError:
        return "numpy"
    return "numba"


def active_backend() -> str:
    """Name of the kernel set currently in use."""
    _ensure()
    return _name


def set_backend(name: str) -> None:
    """Force a kernel set; raises ConfigError on unknown names."""
    global _impl, _name
    if name not in _VALID:
        raise ConfigError(f"unknown kernel backend {name!r}; expected one of {_VALID}")
    _impl = _load(name)
    _name = name


def _ensure() -> None:
    global _impl, _name
    if _impl is None:
        set_backend(_initial_name())


def kernels():
    """The active kernel module (matmul, softmax_rows, rms_norm_rows, rope_apply)."""
    _ensure()
    return _impl
