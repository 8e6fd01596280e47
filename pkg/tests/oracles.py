"""Independent reference implementations used only by the test-suite.

Each oracle deliberately takes the slow, obvious route (explicit loops,
exhaustive search) so that it shares no code path with the package.
"""

import math

import numpy as np


def conv2d_direct(x, k, b, stride, pad):
    n, c, h, w = x.shape
    co, ci, kh, kw = k.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for bi in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy, xs = y * stride - pad + i, xx * stride - pad + j
                                if 0 <= yy < h and 0 <= xs < w:
                                    acc += x[bi, ch, yy, xs] * k[o, ch, i, j]
                    out[bi, o, y, xx] = acc
    return out


def matmul_naive(a, b):
    n, d = a.shape
    k = b.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            s = 0.0
            for t in range(d):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_diff(f, x: np.ndarray, h=1e-5):
    """Numerical gradient of scalar f at x, perturbing x in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-6):
    """Maximum elementwise relative error with an absolute floor on the scale."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def catmull_rom(t):
    a = -0.5
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def bicubic_direct(img, out_h, out_w):
    """Per-output-pixel 4x4 kernel sum with edge clamping (no clamping of values)."""
    h, w, c = img.shape
    out = np.zeros((out_h, out_w, c))
    for oy in range(out_h):
        sy = (oy + 0.5) * h / out_h - 0.5
        y0 = math.floor(sy)
        for ox in range(out_w):
            sx = (ox + 0.5) * w / out_w - 0.5
            x0 = math.floor(sx)
            acc = np.zeros(c)
            for dy in range(-1, 3):
                wy = catmull_rom(sy - (y0 + dy))
                yy = min(max(y0 + dy, 0), h - 1)
                for dx in range(-1, 3):
                    wx = catmull_rom(sx - (x0 + dx))
                    xx = min(max(x0 + dx, 0), w - 1)
                    acc += wy * wx * img[yy, xx]
            out[oy, ox] = acc
    return out


def iou_plain(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_quadratic(boxes, scores, thr):
    """Reference NMS: repeatedly take the best remaining box, drop everything it overlaps."""
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        keep.append(best)
        remaining = [i for i in remaining if i != best and not iou_plain(boxes[best], boxes[i]) > thr]
    return keep


def match_bruteforce(priors_corner, gts, thr):
    """Exhaustive prior matching: returns per-prior gt index or -1."""
    p_count, g_count = len(priors_corner), len(gts)
    ious = [[iou_plain(gts[g], priors_corner[p]) for p in range(p_count)] for g in range(g_count)]
    assigned = [-1] * p_count
    forced = [False] * p_count
    for g in range(g_count):
        best, best_v = None, -1.0
        for p in range(p_count):
            if forced[p]:
                continue
            if ious[g][p] > best_v:
                best, best_v = p, ious[g][p]
        if best is not None:
            forced[best] = True
            assigned[best] = g
    for p in range(p_count):
        if forced[p]:
            continue
        best_g, best_v = -1, -1.0
        for g in range(g_count):
            if ious[g][p] > best_v:
                best_g, best_v = g, ious[g][p]
        if best_g >= 0 and best_v >= thr:
            assigned[p] = best_g
    return assigned
