"""Kernel backend selection.

The compiled extension is preferred. Set ``UPLIFT_LAB_PURE=1`` before import
to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _fallback

if os.environ.get("UPLIFT_LAB_PURE", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _splitter as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None else "python"


def get_kernels(name: str | None = None):
    """Return the kernel module for ``name`` (default: the active backend)."""
    return BACKENDS[name or BACKEND]
