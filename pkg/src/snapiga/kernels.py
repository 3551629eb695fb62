"""Kernel backend selection.

The compiled extension is used when it imports; setting the environment
variable ``SNAPIGA_PURE_PYTHON=1`` forces the numpy fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
assemble = _kernels_py.assemble

if not os.environ.get("SNAPIGA_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        assemble = _compiled.assemble
        BACKEND = "cython"

__all__ = ["assemble", "BACKEND"]
