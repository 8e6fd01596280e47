# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: im2col/col2im, Catmull-Rom resampling and greedy NMS.

Every function here has a numpy twin in ``_fallback`` with the same
signature; ``kernels`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n_img * ho * wo, chans * kh * kw), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, oy, ox, row, col, iy, ix
    for n in range(n_img):
        for oy in range(ho):
            for ox in range(wo):
                row = (n * ho + oy) * wo + ox
                col = 0
                for c in range(chans):
                    for i in range(kh):
                        iy = oy * stride - pad + i
                        if iy < 0 or iy >= h:
                            col += kw
                            continue
                        for j in range(kw):
                            ix = ox * stride - pad + j
                            if 0 <= ix < w:
                                out[row, col] = x[n, c, iy, ix]
                            col += 1
    return out_arr


def col2im(const double[:, ::1] cols, int n_img, int chans, int h, int w,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n_img, chans, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, oy, ox, row, col, iy, ix
    for n in range(n_img):
        for oy in range(ho):
            for ox in range(wo):
                row = (n * ho + oy) * wo + ox
                col = 0
                for c in range(chans):
                    for i in range(kh):
                        iy = oy * stride - pad + i
                        if iy < 0 or iy >= h:
                            col += kw
                            continue
                        for j in range(kw):
                            ix = ox * stride - pad + j
                            if 0 <= ix < w:
                                out[n, c, iy, ix] += cols[row, col]
                            col += 1
    return out_arr


cdef inline double _cubic(double t) nogil:
    cdef double a = -0.5
    t = fabs(t)
    if t <= 1.0:
        return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    if t < 2.0:
        return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    return 0.0


cdef void _taps(Py_ssize_t n_in, Py_ssize_t n_out, long[:, ::1] idx, double[:, ::1] wts):
    cdef Py_ssize_t o, k
    cdef double scale = <double>n_in / <double>n_out
    cdef double src, t
    cdef long base, q
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        base = <long>floor(src)
        t = src - base
        for k in range(4):
            q = base - 1 + k
            if q < 0:
                q = 0
            elif q > n_in - 1:
                q = n_in - 1
            idx[o, k] = q
            wts[o, k] = _cubic(t - (k - 1))


def resize_bicubic(const double[:, :, ::1] img, int out_h, int out_w):
    """Separable Catmull-Rom resize of an HxWxC array (no clamping)."""
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], chans = img.shape[2]
    cdef long[:, ::1] ix = np.empty((out_w, 4), dtype=np.int64)
    cdef double[:, ::1] wx = np.empty((out_w, 4), dtype=np.float64)
    cdef long[:, ::1] iy = np.empty((out_h, 4), dtype=np.int64)
    cdef double[:, ::1] wy = np.empty((out_h, 4), dtype=np.float64)
    _taps(w, out_w, ix, wx)
    _taps(h, out_h, iy, wy)
    tmp_arr = np.zeros((h, out_w, chans), dtype=np.float64)
    out_arr = np.zeros((out_h, out_w, chans), dtype=np.float64)
    cdef double[:, :, ::1] tmp = tmp_arr
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t r, o, k, c
    for r in range(h):
        for o in range(out_w):
            for k in range(4):
                for c in range(chans):
                    tmp[r, o, c] += wx[o, k] * img[r, ix[o, k], c]
    for o in range(out_h):
        for k in range(4):
            for r in range(out_w):
                for c in range(chans):
                    out[o, r, c] += wy[o, k] * tmp[iy[o, k], r, c]
    return out_arr


def nms(const double[:, ::1] boxes, const double[::1] scores, double iou_threshold):
    """Greedy suppression; returns kept indices in descending-score order."""
    cdef Py_ssize_t n = boxes.shape[0]
    order_arr = np.argsort(-np.asarray(scores), kind="stable")
    cdef long[::1] order = order_arr.astype(np.int64)
    cdef cnp.uint8_t[::1] dead = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t a, b, i, j
    cdef double ix0, iy0, ix1, iy1, inter, area_i, area_j, union
    keep = []
    for a in range(n):
        i = order[a]
        if dead[i]:
            continue
        keep.append(i)
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for b in range(a + 1, n):
            j = order[b]
            if dead[j]:
                continue
            ix0 = boxes[i, 0] if boxes[i, 0] > boxes[j, 0] else boxes[j, 0]
            iy0 = boxes[i, 1] if boxes[i, 1] > boxes[j, 1] else boxes[j, 1]
            ix1 = boxes[i, 2] if boxes[i, 2] < boxes[j, 2] else boxes[j, 2]
            iy1 = boxes[i, 3] if boxes[i, 3] < boxes[j, 3] else boxes[j, 3]
            if ix1 <= ix0 or iy1 <= iy0:
                continue
            inter = (ix1 - ix0) * (iy1 - iy0)
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            union = area_i + area_j - inter
            if union > 0 and inter / union > iou_threshold:
                dead[j] = 1
    return np.asarray(keep, dtype=np.int64)
