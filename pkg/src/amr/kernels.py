"""Hot per-sample kernels: compiled when available, pure Python otherwise.

``BACKEND`` reports which implementation was selected at import. Setting
the environment variable ``AMR_PURE_PYTHON=1`` forces the fallback.
"""
from __future__ import annotations

import os

from . import _fallback

if os.environ.get("AMR_PURE_PYTHON") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

linear_sum_assignment = _impl.linear_sum_assignment
iou_matrix = _impl.iou_matrix
giou_matrix = _impl.giou_matrix
greedy_average_precision = _impl.greedy_average_precision

__all__ = ["BACKEND", "linear_sum_assignment", "iou_matrix", "giou_matrix", "greedy_average_precision"]
