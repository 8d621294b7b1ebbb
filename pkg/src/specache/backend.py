"""Kernel backend selection.

The compiled extension is preferred when importable; the pure-Python
fallback is always available.  ``SPECACHE_KERNELS=pure`` (or
``compiled``) forces a choice at import time, and tests can switch at
runtime via :func:`set_backend`.  Both backends are bit-identical by
contract, so swapping them never changes results, only speed.
"""

from __future__ import annotations

import os
from types import ModuleType

from .errors import ConfigError

_active: ModuleType | None = None


def _load(name: str) -> ModuleType:
    if name == "pure":
        from specache import _kernels_py

        return _kernels_py
    if name == "compiled":
        from specache import _kernels  # type: ignore[attr-defined]

        return _kernels
    raise ConfigError(f"unknown kernel backend {name!r} (expected 'compiled' or 'pure')")


def _load_default() -> ModuleType:
    forced = os.environ.get("SPECACHE_KERNELS")
    if forced:
        return _load(forced)
    try:
        return _load("compiled")
    except ImportError:
        return _load("pure")


def get_kernels() -> ModuleType:
    """Return the active kernel module."""
    global _active
    if _active is None:
        _active = _load_default()
    return _active


def set_backend(name: str) -> ModuleType:
    """Force a backend by name; returns the module. Intended for tests."""
    global _active
    _active = _load(name)
    return _active


def active_backend_name() -> str:
    return get_kernels().BACKEND_NAME


def compiled_available() -> bool:
    try:
        _load("compiled")
    except ImportError:
        return False
    return True
