"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
reference runs. Set ``THERMOBOUND_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py as python_impl

compiled_impl = None
if os.environ.get("THERMOBOUND_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_impl  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled_impl = None

BACKEND = "cython" if compiled_impl is not None else "python"

uniform_score_terms = (compiled_impl or python_impl).uniform_score_terms
uniform_log_density = python_impl.uniform_log_density

__all__ = ["BACKEND", "compiled_impl", "python_impl", "uniform_score_terms", "uniform_log_density"]
