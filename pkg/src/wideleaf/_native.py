"""Kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ``WIDELEAF_KERNELS=python`` (or ``compiled``) to force a backend.
"""

import os

import numpy as np

_forced = os.environ.get("WIDELEAF_KERNELS", "").strip().lower()

if _forced == "python":
    from . import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _forced == "compiled":
            raise
        from . import _kernels_py as _impl

        BACKEND = "python"


def kernel_backend() -> str:
    """Name of the active kernel backend: 'compiled' or 'python'."""
    return BACKEND


def _as_boxes(arr) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != 4:
        raise ValueError(f"expected an (n, 4) box array, got shape {out.shape}")
    return out


def pairwise_iou(a, b) -> np.ndarray:
    a, b = _as_boxes(a), _as_boxes(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    return np.asarray(_impl.pairwise_iou(a, b))


def nms_keep(boxes, thr: float) -> np.ndarray:
    boxes = _as_boxes(boxes)
    if boxes.shape[0] == 0:
        return np.empty(0, dtype=np.intp)
    return np.asarray(_impl.nms_keep(boxes, float(thr)))


def greedy_assign(iou, thr: float) -> np.ndarray:
    iou = np.ascontiguousarray(iou, dtype=np.float64)
    if iou.ndim != 2:
        raise ValueError(f"expected a 2-d IoU matrix, got shape {iou.shape}")
    if iou.shape[0] == 0 or iou.shape[1] == 0:
        return np.full(iou.shape[0], -1, dtype=np.int64)
    return np.asarray(_impl.greedy_assign(iou, float(thr)))
