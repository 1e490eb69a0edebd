"""Kernel backend selection.

The filters run their hot loops through one of two interchangeable kernel
modules: ``numba`` (JIT-compiled, default) or ``numpy`` (pure vectorized
fallback). Selection order: :func:`set_backend` > the ``CARRIERPF_BACKEND``
environment variable (``numba``, ``numpy`` or ``auto``) > numba if it
imports, numpy otherwise.
"""

from __future__ import annotations

import os
from types import ModuleType

_ENV_VAR = "CARRIERPF_BACKEND"
_active: ModuleType | None = None
_active_name: str | None = None


def _load(name: str) -> ModuleType:
    if name == "numpy":
        from . import kernels_numpy

        return kernels_numpy
    if name == "numba":
        from . import kernels_numba

        return kernels_numba
    raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")


def set_backend(name: str) -> None:
    """Force the kernel backend for this process (overrides the env var)."""
    global _active, _active_name
    _active = _load(name)
    _active_name = name


def backend_name() -> str:
    """Name of the backend that get_kernels() returns."""
    if _active_name is not None:
        return _active_name
    requested = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if requested in ("numba", "numpy"):
        return requested
    try:
        import numba  # noqa: F401

        return "numba"
    except ImportError:
        return "numpy"


def get_kernels() -> ModuleType:
    """The active kernel module (resolved once, then cached)."""
    global _active, _active_name
    if _active is None:
        name = backend_name()
        _active = _load(name)
        _active_name = name
    return _active
