# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled box kernels: pairwise IoU, greedy NMS, greedy assignment.

Semantics mirror ``_kernels_py`` exactly; see that module for contracts.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline double _dmax(double a, double b) nogil:
    return a if a > b else b


cdef inline double _dmin(double a, double b) nogil:
    return a if a < b else b


def pairwise_iou(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double ax0, ay0, ax1, ay1, area_a, area_b, iw, ih, inter
    with nogil:
        for i in range(n):
            ax0 = a[i, 0]; ay0 = a[i, 1]; ax1 = a[i, 2]; ay1 = a[i, 3]
            area_a = (ax1 - ax0) * (ay1 - ay0)
            for j in range(m):
                iw = _dmax(_dmin(ax1, b[j, 2]) - _dmax(ax0, b[j, 0]), 0.0)
                ih = _dmax(_dmin(ay1, b[j, 3]) - _dmax(ay0, b[j, 1]), 0.0)
                inter = iw * ih
                area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
                out[i, j] = inter / ((area_a + area_b) - inter)
    return out_arr


def nms_keep(double[:, ::1] boxes, double thr):
    cdef Py_ssize_t n = boxes.shape[0]
    suppressed_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] suppressed = suppressed_arr
    keep = []
    cdef Py_ssize_t i, j
    cdef double ix0, iy0, ix1, iy1, area_i, area_j, iw, ih, inter, iou
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        ix0 = boxes[i, 0]; iy0 = boxes[i, 1]; ix1 = boxes[i, 2]; iy1 = boxes[i, 3]
        area_i = (ix1 - ix0) * (iy1 - iy0)
        for j in range(i + 1, n):
            if suppressed[j]:
                continue
            iw = _dmax(_dmin(ix1, boxes[j, 2]) - _dmax(ix0, boxes[j, 0]), 0.0)
            ih = _dmax(_dmin(iy1, boxes[j, 3]) - _dmax(iy0, boxes[j, 1]), 0.0)
            inter = iw * ih
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            iou = inter / ((area_i + area_j) - inter)
            if iou >= thr:
                suppressed[j] = 1
    return np.asarray(keep, dtype=np.intp)


def greedy_assign(double[:, ::1] iou, double thr):
    cdef Py_ssize_t n_rows = iou.shape[0]
    cdef Py_ssize_t n_cols = iou.shape[1]
    out_arr = np.full(n_rows, -1, dtype=np.int64)
    cdef long long[::1] out = out_arr
    free_arr = np.ones(n_cols, dtype=np.uint8)
    cdef unsigned char[::1] free = free_arr
    cdef Py_ssize_t r, c, best
    cdef double best_iou, v
    with nogil:
        for r in range(n_rows):
            best = -1
            best_iou = 0.0
            for c in range(n_cols):
                if not free[c]:
                    continue
                v = iou[r, c]
                if v >= thr and v > best_iou:
                    best = c
                    best_iou = v
            if best >= 0:
                out[r] = best
                free[best] = 0
    return out_arr
