"""Hot kernels for the backfitting solver.

The compiled Cython module is used when it was built; otherwise the numpy
implementations are used. Set ``HANOVA_PURE_PYTHON=1`` to force the
fallback. ``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("HANOVA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

margin_sum = _active.margin_sum
block_update = _active.block_update
gather_add = _active.gather_add
wpls_objective = _active.wpls_objective

__all__ = [
    "BACKEND",
    "block_update",
    "compiled_backend",
    "gather_add",
    "margin_sum",
    "python_backend",
    "wpls_objective",
]
