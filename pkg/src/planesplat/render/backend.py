"""Selects the compositing kernel at import time.

The compiled extension is preferred; set ``PLANESPLAT_BACKEND=python`` to
force the NumPy fallback.
"""
from __future__ import annotations

import os
import warnings

from . import _fallback

try:
    from . import _kernels
except ImportError as exc:  # extension not built
    _kernels = None
    if os.environ.get("PLANESPLAT_BACKEND", "auto") == "compiled":
        raise
    warnings.warn(f"planesplat: compiled kernels unavailable ({exc}); using NumPy fallback")

_KERNELS = {"python": _fallback.composite}
if _kernels is not None:
    _KERNELS["compiled"] = _kernels.composite

DEFAULT = os.environ.get("PLANESPLAT_BACKEND", "auto")
if DEFAULT == "auto":
    DEFAULT = "compiled" if "compiled" in _KERNELS else "python"
if DEFAULT not in _KERNELS:
    raise ImportError(f"PLANESPLAT_BACKEND={DEFAULT!r} is not available; choose from {sorted(_KERNELS)}")


def available() -> list[str]:
    return sorted(_KERNELS)


def composite(*args, backend: str | None = None):
    return _KERNELS[backend or DEFAULT](*args)
