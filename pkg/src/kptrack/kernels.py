"""Inner loops that dominate runtime, each with a numba and a numpy version.

Every public kernel is bound at import time to the numba implementation
when :data:`kptrack._accel.USE_NUMBA` is true and to the numpy one
otherwise. Both implementations are always importable (``NUMPY`` and
``NUMBA`` tables) so tests and the benchmark can compare them directly.
"""

import numpy as np

from ._accel import USE_NUMBA, HAVE_NUMBA, njit

# ---------------------------------------------------------------------------
# 3x3 convolution lowering, NHWC layout, zero padding 1.
# Column order of the lowered matrix is (ki, kj, channel).
# ---------------------------------------------------------------------------


def conv_out_size(n, stride):
    return (n - 1) // stride + 1


def _im2col_np(x, stride):
    b, h, w, c = x.shape
    ho, wo = conv_out_size(h, stride), conv_out_size(w, stride)
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, ho, wo, 3, 3, c), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki, kj, :] = xp[:, ki:ki + stride * (ho - 1) + 1:stride,
                                          kj:kj + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(b * ho * wo, 9 * c)


def _col2im_np(cols, shape, stride):
    b, h, w, c = shape
    ho, wo = conv_out_size(h, stride), conv_out_size(w, stride)
    cols = cols.reshape(b, ho, wo, 3, 3, c)
    gp = np.zeros((b, h + 2, w + 2, c), dtype=cols.dtype)
    for ki in range(3):
        for kj in range(3):
            gp[:, ki:ki + stride * (ho - 1) + 1:stride,
               kj:kj + stride * (wo - 1) + 1:stride, :] += cols[:, :, :, ki, kj, :]
    return gp[:, 1:-1, 1:-1, :]


@njit(cache=True, nogil=True)
def _im2col_nb(x, stride):
    b, h, w, c = x.shape
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    cols = np.zeros((b * ho * wo, 9 * c), dtype=x.dtype)
    row = 0
    for n in range(b):
        for oi in range(ho):
            for oj in range(wo):
                col = 0
                for ki in range(3):
                    ii = oi * stride + ki - 1
                    for kj in range(3):
                        jj = oj * stride + kj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            for ch in range(c):
                                cols[row, col + ch] = x[n, ii, jj, ch]
                        col += c
                row += 1
    return cols


@njit(cache=True, nogil=True)
def _col2im_nb_impl(cols, b, h, w, c, stride):
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    g = np.zeros((b, h, w, c), dtype=cols.dtype)
    row = 0
    for n in range(b):
        for oi in range(ho):
            for oj in range(wo):
                col = 0
                for ki in range(3):
                    ii = oi * stride + ki - 1
                    for kj in range(3):
                        jj = oj * stride + kj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            for ch in range(c):
                                g[n, ii, jj, ch] += cols[row, col + ch]
                        col += c
                row += 1
    return g


def _col2im_nb(cols, shape, stride):
    b, h, w, c = shape
    return _col2im_nb_impl(np.ascontiguousarray(cols), b, h, w, c, stride)


# ---------------------------------------------------------------------------
# Weighted row gather / scatter: out[k] = sum_j w[k, j] * x[idx[k, j]].
# Used for bilinear descriptor sampling and neighbor-window lookups.
# ---------------------------------------------------------------------------


def _gather_rows_np(x, idx, w):
    return np.einsum("kj,kjd->kd", w, x[idx]).astype(x.dtype, copy=False)


def _scatter_rows_np(g, idx, w, n_rows):
    out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
    contrib = (w[:, :, None] * g[:, None, :]).astype(g.dtype, copy=False)
    np.add.at(out, idx.reshape(-1), contrib.reshape(-1, g.shape[1]))
    return out


@njit(cache=True, nogil=True)
def _gather_rows_nb(x, idx, w):
    k, j = idx.shape
    d = x.shape[1]
    out = np.zeros((k, d), dtype=x.dtype)
    for a in range(k):
        for b in range(j):
            wt = w[a, b]
            r = idx[a, b]
            for c in range(d):
                out[a, c] += wt * x[r, c]
    return out


@njit(cache=True, nogil=True)
def _scatter_rows_nb(g, idx, w, n_rows):
    k, j = idx.shape
    d = g.shape[1]
    out = np.zeros((n_rows, d), dtype=g.dtype)
    for a in range(k):
        for b in range(j):
            wt = w[a, b]
            r = idx[a, b]
            for c in range(d):
                out[r, c] += wt * g[a, c]
    return out


# ---------------------------------------------------------------------------
# Greedy non-max suppression over candidates sorted by decreasing score.
# A candidate survives if no already-accepted point lies within `radius`
# pixels in both axes (Chebyshev distance).
# ---------------------------------------------------------------------------


def _greedy_nms_np(order, h, w, radius, max_count):
    taken = np.zeros((h, w), dtype=np.bool_)
    keep = []
    for flat in order:
        i, j = divmod(int(flat), w)
        i0, i1 = max(i - radius, 0), min(i + radius + 1, h)
        j0, j1 = max(j - radius, 0), min(j + radius + 1, w)
        if taken[i0:i1, j0:j1].any():
            continue
        taken[i, j] = True
        keep.append(flat)
        if len(keep) >= max_count:
            break
    return np.asarray(keep, dtype=np.int64)


@njit(cache=True, nogil=True)
def _greedy_nms_nb(order, h, w, radius, max_count):
    taken = np.zeros((h, w), dtype=np.bool_)
    keep = np.empty(min(order.shape[0], max_count), dtype=np.int64)
    n = 0
    for t in range(order.shape[0]):
        if n >= max_count:
            break
        flat = order[t]
        i = flat // w
        j = flat - i * w
        blocked = False
        for a in range(max(i - radius, 0), min(i + radius + 1, h)):
            for b in range(max(j - radius, 0), min(j + radius + 1, w)):
                if taken[a, b]:
                    blocked = True
                    break
            if blocked:
                break
        if not blocked:
            taken[i, j] = True
            keep[n] = flat
            n += 1
    return keep[:n]


# ---------------------------------------------------------------------------
# Polygon fill: pixel (i, j) is inside when its center (j + .5, i + .5)
# passes the even-odd crossing test. Hard edges, no anti-aliasing.
# ---------------------------------------------------------------------------


def _fill_polygon_np(poly, h, w):
    xs = np.arange(w, dtype=np.float64)[None, :] + 0.5
    ys = np.arange(h, dtype=np.float64)[:, None] + 0.5
    inside = np.zeros((h, w), dtype=np.bool_)
    n = poly.shape[0]
    for e in range(n):
        xi, yi = poly[e]
        xj, yj = poly[e - 1] if e > 0 else poly[n - 1]
        if yi == yj:
            continue
        straddle = (yi > ys) != (yj > ys)
        xcross = (xj - xi) * (ys - yi) / (yj - yi) + xi
        inside ^= straddle & (xs < xcross)
    return inside


@njit(cache=True, nogil=True)
def _fill_polygon_nb(poly, h, w):
    inside = np.zeros((h, w), dtype=np.bool_)
    n = poly.shape[0]
    for i in range(h):
        y = i + 0.5
        for e in range(n):
            xi = poly[e, 0]
            yi = poly[e, 1]
            p = e - 1 if e > 0 else n - 1
            xj = poly[p, 0]
            yj = poly[p, 1]
            if yi == yj:
                continue
            if (yi > y) != (yj > y):
                xcross = (xj - xi) * (y - yi) / (yj - yi) + xi
                for j in range(w):
                    if j + 0.5 < xcross:
                        inside[i, j] = not inside[i, j]
                    else:
                        break
    return inside


# ---------------------------------------------------------------------------
# Bilinear image sampling at continuous (x, y); pixel centers sit at
# integer + 0.5 and samples outside the image read as `fill`.
# ---------------------------------------------------------------------------


def _sample_image_np(img, xs, ys, fill):
    h, w = img.shape
    u = xs - 0.5
    v = ys - 0.5
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fu = u - j0
    fv = v - i0
    out = np.zeros(xs.shape, dtype=np.float64)
    for di, wv in ((0, 1.0 - fv), (1, fv)):
        for dj, wu in ((0, 1.0 - fu), (1, fu)):
            ii = i0 + di
            jj = j0 + dj
            ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
            vals = np.where(ok, img[np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1)], fill)
            out += wv * wu * vals
    return out


@njit(cache=True, nogil=True)
def _sample_image_nb_impl(img, xs, ys, fill):
    h, w = img.shape
    n = xs.shape[0]
    out = np.zeros(n, dtype=np.float64)
    for k in range(n):
        u = xs[k] - 0.5
        v = ys[k] - 0.5
        j0 = np.int64(np.floor(u))
        i0 = np.int64(np.floor(v))
        fu = u - j0
        fv = v - i0
        acc = 0.0
        for di in range(2):
            wv = fv if di == 1 else 1.0 - fv
            ii = i0 + di
            for dj in range(2):
                wu = fu if dj == 1 else 1.0 - fu
                jj = j0 + dj
                if 0 <= ii < h and 0 <= jj < w:
                    val = img[ii, jj]
                else:
                    val = fill
                acc += wv * wu * val
        out[k] = acc
    return out


def _sample_image_nb(img, xs, ys, fill):
    shape = np.shape(xs)
    out = _sample_image_nb_impl(np.ascontiguousarray(img, dtype=np.float64),
                                np.ascontiguousarray(xs, dtype=np.float64).reshape(-1),
                                np.ascontiguousarray(ys, dtype=np.float64).reshape(-1),
                                float(fill))
    return out.reshape(shape)


NUMPY = {
    "im2col": _im2col_np,
    "col2im": _col2im_np,
    "gather_rows": _gather_rows_np,
    "scatter_rows": _scatter_rows_np,
    "greedy_nms": _greedy_nms_np,
    "fill_polygon": _fill_polygon_np,
    "sample_image": _sample_image_np,
}

NUMBA = {
    "im2col": _im2col_nb,
    "col2im": _col2im_nb,
    "gather_rows": _gather_rows_nb,
    "scatter_rows": _scatter_rows_nb,
    "greedy_nms": _greedy_nms_nb,
    "fill_polygon": _fill_polygon_nb,
    "sample_image": _sample_image_nb,
} if HAVE_NUMBA else {}

_active = NUMBA if USE_NUMBA else NUMPY

im2col = _active["im2col"]
col2im = _active["col2im"]
gather_rows = _active["gather_rows"]
scatter_rows = _active["scatter_rows"]
greedy_nms = _active["greedy_nms"]
fill_polygon = _active["fill_polygon"]
sample_image = _active["sample_image"]
