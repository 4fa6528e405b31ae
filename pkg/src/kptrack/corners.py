"""Shi-Tomasi corner ranking with greedy non-max suppression."""

import numpy as np

from . import kernels


def _box5(a):
    p = np.pad(a, 2, mode="constant")
    c = np.cumsum(np.cumsum(p, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[5:, 5:] - c[:-5, 5:] - c[5:, :-5] + c[:-5, :-5]


def min_eigen_score(img):
    """Smaller eigenvalue of the 5x5 box-summed structure tensor (Sobel grads)."""
    img = np.asarray(img, dtype=np.float64)
    p = np.pad(img, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    a = _box5(gx * gx)
    b = _box5(gx * gy)
    c = _box5(gy * gy)
    return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)


def detect_corners(img, max_count=512, radius=4, quality=0.01, border=4):
    """Top corners by min-eigenvalue score.

    Returns (positions (N, 2) as pixel-center (x, y), scores (N,)), sorted by
    decreasing score with ties broken by raster order.
    """
    score = min_eigen_score(img)
    h, w = score.shape
    if border:
        score[:border] = 0
        score[-border:] = 0
        score[:, :border] = 0
        score[:, -border:] = 0
    top = score.max()
    if top <= 0:
        return np.zeros((0, 2)), np.zeros(0)
    flat = score.ravel()
    cand = np.nonzero(flat > quality * top)[0]
    order = cand[np.argsort(-flat[cand], kind="stable")]
    keep = kernels.greedy_nms(order.astype(np.int64), h, w, int(radius), int(max_count))
    i, j = np.divmod(keep, w)
    return np.stack([j + 0.5, i + 0.5], axis=1).astype(np.float64), flat[keep]


def score_at(img, pts):
    """Corner score sampled at the pixel containing each point."""
    score = min_eigen_score(img)
    h, w = score.shape
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    j = np.clip(np.floor(p[:, 0]).astype(int), 0, w - 1)
    i = np.clip(np.floor(p[:, 1]).astype(int), 0, h - 1)
    return score[i, j]
