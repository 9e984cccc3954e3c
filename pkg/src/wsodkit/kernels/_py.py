"""Pure-numpy fallbacks for the compiled box-geometry kernels.

Semantics must match ``wsodkit.kernels._ext``; the test suite runs both
backends side by side. Keep the formulas in sync with the .pyx file.
"""

import numpy as np


def _as_boxes(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 4:
        raise ValueError("boxes must have shape (n, 4)")
    return a


def iou_matrix(boxes_a, boxes_b):
    """Pairwise intersection-over-union between two box arrays.

    Boxes are ``[x1, y1, x2, y2]`` in continuous coordinates; area is
    ``(x2 - x1) * (y2 - y1)`` with no +1 offset. Disjoint pairs score 0.
    """
    a = _as_boxes(boxes_a)
    b = _as_boxes(boxes_b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.maximum(ix2 - ix1, 0.0)
    ih = np.maximum(iy2 - iy1, 0.0)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    pos = inter > 0.0
    np.divide(inter, union, out=out, where=pos)
    return out


def nms(boxes, scores, thresh):
    """Greedy non-maximum suppression.

    Returns indices of kept boxes in descending score order (ties keep the
    earlier input index). A box is suppressed when its IoU with an already
    kept box exceeds ``thresh``.
    """
    b = _as_boxes(boxes)
    s = np.ascontiguousarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] != b.shape[0]:
        raise ValueError("scores must have shape (n,)")
    x1, y1, x2, y2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    order = np.argsort(-s, kind="stable")
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        rest = order[1:]
        ix1 = np.maximum(x1[i], x1[rest])
        iy1 = np.maximum(y1[i], y1[rest])
        ix2 = np.minimum(x2[i], x2[rest])
        iy2 = np.minimum(y2[i], y2[rest])
        iw = np.maximum(ix2 - ix1, 0.0)
        ih = np.maximum(iy2 - iy1, 0.0)
        inter = iw * ih
        iou = np.zeros_like(inter)
        pos = inter > 0.0
        np.divide(inter, areas[i] + areas[rest] - inter, out=iou, where=pos)
        order = rest[iou <= thresh]
    return np.asarray(keep, dtype=np.int64)


def box_mean_pool(grid, boxes):
    """Mean of grid values at the pixel centers each box covers.

    Pixel (i, j) has center (j + 0.5, i + 0.5); a center is covered when
    ``x1 <= cx < x2`` and ``y1 <= cy < y2``, intersected with the grid.
    Boxes covering no center yield NaN; callers decide how to fail.
    """
    g = np.ascontiguousarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("grid must be 2-D")
    b = _as_boxes(boxes)
    h, w = g.shape
    out = np.empty(b.shape[0], dtype=np.float64)
    for k in range(b.shape[0]):
        j0 = max(0, int(np.ceil(b[k, 0] - 0.5)))
        j1 = min(w, int(np.ceil(b[k, 2] - 0.5)))
        i0 = max(0, int(np.ceil(b[k, 1] - 0.5)))
        i1 = min(h, int(np.ceil(b[k, 3] - 0.5)))
        if j0 >= j1 or i0 >= i1:
            out[k] = np.nan
        else:
            out[k] = g[i0:i1, j0:j1].mean()
    return out
