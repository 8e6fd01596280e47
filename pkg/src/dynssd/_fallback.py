"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, kh, kw) -> (n, ho, wo, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    blocks = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def cubic(t):
    """Catmull-Rom kernel (a = -0.5), vectorised."""
    a = -0.5
    t = np.abs(np.asarray(t, dtype=np.float64))
    near = ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    far = ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def resize_matrix(n_in, n_out, start=0.0, length=None):
    """Dense (n_out, n_in) operator of 1-D Catmull-Rom resampling with edge clamping.

    The output grid spans the source interval [start, start + length), which
    defaults to the whole input.
    """
    length = n_in if length is None else length
    src = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in range(4):
        idx = np.clip(base - 1 + k, 0, n_in - 1)
        np.add.at(mat, (rows, idx), cubic(frac - (k - 1)))
    return mat


def resize_bicubic(img, out_h, out_w):
    h, w, c = img.shape
    my, mx = resize_matrix(h, out_h), resize_matrix(w, out_w)
    tmp = np.einsum("ow,hwc->hoc", mx, img)
    return np.einsum("oh,hwc->owc", my, tmp)


def nms(boxes, scores, iou_threshold):
    order = np.argsort(-np.asarray(scores), kind="stable")
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for a, i in enumerate(order):
        if not alive[a]:
            continue
        keep.append(i)
        rest = order[a + 1 :]
        b = boxes[rest]
        ix0 = np.maximum(boxes[i, 0], b[:, 0])
        iy0 = np.maximum(boxes[i, 1], b[:, 1])
        ix1 = np.minimum(boxes[i, 2], b[:, 2])
        iy1 = np.minimum(boxes[i, 3], b[:, 3])
        overlap = (ix1 > ix0) & (iy1 > iy0)
        inter = np.where(overlap, (ix1 - ix0) * (iy1 - iy0), 0.0)
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        union = area_i + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            hit = overlap & (union > 0) & (inter / np.where(union > 0, union, 1.0) > iou_threshold)
        alive[a + 1 :] &= ~hit
    return np.asarray(keep, dtype=np.int64)
