"""Kernel selection: compiled extension when importable, numpy otherwise.

Set ``STACKGAME_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
affine_paths = _kernels_py.affine_paths

if os.environ.get("STACKGAME_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        affine_paths = _compiled.affine_paths
        BACKEND = "compiled"
