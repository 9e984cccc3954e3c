# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled box-geometry kernels: pairwise IoU, greedy NMS, box mean pooling.

Must stay semantically identical to wsodkit.kernels._py.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

from libc.math cimport ceil


cdef cnp.ndarray[cnp.float64_t, ndim=2] _as_boxes(object a):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError("boxes must have shape (n, 4)")
    return arr


def iou_matrix(object boxes_a, object boxes_b):
    """Pairwise IoU between (n, 4) and (m, 4) box arrays; disjoint pairs score 0."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = _as_boxes(boxes_a)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = _as_boxes(boxes_b)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double ax1, ay1, ax2, ay2, area_a
    cdef double ix1, iy1, ix2, iy2, iw, ih, inter
    for i in range(n):
        ax1 = a[i, 0]; ay1 = a[i, 1]; ax2 = a[i, 2]; ay2 = a[i, 3]
        area_a = (ax2 - ax1) * (ay2 - ay1)
        for j in range(m):
            ix1 = max(ax1, b[j, 0])
            iy1 = max(ay1, b[j, 1])
            ix2 = min(ax2, b[j, 2])
            iy2 = min(ay2, b[j, 3])
            iw = max(ix2 - ix1, 0.0)
            ih = max(iy2 - iy1, 0.0)
            inter = iw * ih
            if inter > 0.0:
                out[i, j] = inter / (
                    area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
                )
    return out


def nms(object boxes, object scores, double thresh):
    """Greedy NMS; kept indices in descending score order, stable ties.

    Suppresses a box when its IoU with an already kept box exceeds thresh.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = _as_boxes(boxes)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] s = np.ascontiguousarray(
        scores, dtype=np.float64
    )
    if s.ndim != 1 or s.shape[0] != b.shape[0]:
        raise ValueError("scores must have shape (n,)")
    cdef cnp.ndarray[cnp.int64_t, ndim=1] order = np.argsort(-s, kind="stable").astype(
        np.int64
    )
    cdef Py_ssize_t n = b.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] suppressed = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] keep = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t nkeep = 0
    cdef Py_ssize_t a, c, i, j
    cdef double ax1, ay1, ax2, ay2, area_i
    cdef double ix1, iy1, ix2, iy2, iw, ih, inter, iou
    for a in range(n):
        i = order[a]
        if suppressed[i]:
            continue
        keep[nkeep] = i
        nkeep += 1
        ax1 = b[i, 0]; ay1 = b[i, 1]; ax2 = b[i, 2]; ay2 = b[i, 3]
        area_i = (ax2 - ax1) * (ay2 - ay1)
        for c in range(a + 1, n):
            j = order[c]
            if suppressed[j]:
                continue
            ix1 = max(ax1, b[j, 0])
            iy1 = max(ay1, b[j, 1])
            ix2 = min(ax2, b[j, 2])
            iy2 = min(ay2, b[j, 3])
            iw = max(ix2 - ix1, 0.0)
            ih = max(iy2 - iy1, 0.0)
            inter = iw * ih
            if inter > 0.0:
                iou = inter / (
                    area_i + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
                )
                if iou > thresh:
                    suppressed[j] = 1
    return keep[:nkeep].copy()


def box_mean_pool(object grid, object boxes):
    """Mean grid value over pixel centers inside each box; NaN when empty.

    Pixel (i, j) has center (j + 0.5, i + 0.5); covered when
    x1 <= cx < x2 and y1 <= cy < y2, intersected with the grid.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] g = np.ascontiguousarray(
        grid, dtype=np.float64
    )
    if g.ndim != 2:
        raise ValueError("grid must be 2-D")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = _as_boxes(boxes)
    cdef Py_ssize_t h = g.shape[0], w = g.shape[1], n = b.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t k, i, j, i0, i1, j0, j1
    cdef double acc
    cdef long cnt
    for k in range(n):
        j0 = <Py_ssize_t>ceil(b[k, 0] - 0.5)
        j1 = <Py_ssize_t>ceil(b[k, 2] - 0.5)
        i0 = <Py_ssize_t>ceil(b[k, 1] - 0.5)
        i1 = <Py_ssize_t>ceil(b[k, 3] - 0.5)
        if j0 < 0:
            j0 = 0
        if i0 < 0:
            i0 = 0
        if j1 > w:
            j1 = w
        if i1 > h:
            i1 = h
        if j0 >= j1 or i0 >= i1:
            out[k] = <double>np.nan
        else:
            acc = 0.0
            cnt = 0
            for i in range(i0, i1):
                for j in range(j0, j1):
                    acc += g[i, j]
                    cnt += 1
            out[k] = acc / cnt
    return out
