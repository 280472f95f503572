"""Pure-Python (numpy) box kernels.

Fallback implementations of the hot loops, semantically identical to the
compiled versions in ``_kernels.pyx``. Inputs are float64 C-contiguous
arrays of corner boxes (x_min, y_min, x_max, y_max) with positive area.
"""

import numpy as np


def pairwise_iou(a, b):
    """IoU matrix of shape (len(a), len(b)). Zero-area overlap counts as 0."""
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        return np.zeros((n, m), dtype=np.float64)
    iw = np.minimum(a[:, 2, None], b[None, :, 2]) - np.maximum(a[:, 0, None], b[None, :, 0])
    ih = np.minimum(a[:, 3, None], b[None, :, 3]) - np.maximum(a[:, 1, None], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = (area_a[:, None] + area_b[None, :]) - inter
    return inter / union


def nms_keep(boxes, thr):
    """Greedy suppression over boxes already sorted in priority order.

    Returns indices (into the sorted order) of survivors: a box survives iff
    its IoU with every earlier survivor is < thr.
    """
    n = boxes.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.intp)
    x0, y0, x1, y1 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x1 - x0) * (y1 - y0)
    order = np.arange(n, dtype=np.intp)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
        iou = inter / ((areas[i] + areas[rest]) - inter)
        order = rest[iou < thr]
    return np.asarray(keep, dtype=np.intp)


def greedy_assign(iou, thr):
    """Greedy one-to-one assignment over a precomputed IoU matrix.

    Rows are predictions in priority order, columns candidate gold boxes.
    Each row takes the still-free column with the highest IoU >= thr
    (ties: lowest column index). Returns per-row column index or -1.
    """
    n_rows, n_cols = iou.shape
    out = np.full(n_rows, -1, dtype=np.int64)
    if n_rows == 0 or n_cols == 0:
        return out
    free = np.ones(n_cols, dtype=bool)
    for r in range(n_rows):
        cand = np.where(free & (iou[r] >= thr), iou[r], -1.0)
        c = int(np.argmax(cand))
        if cand[c] >= thr:
            out[r] = c
            free[c] = False
    return out
