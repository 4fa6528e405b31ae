"""Projective transforms between image planes."""

import numpy as np


class PointAtInfinity(ArithmeticError):
    pass


def normalize(h):
    h = np.asarray(h, dtype=np.float64)
    if abs(h[2, 2]) < 1e-12:
        raise ValueError("homography has h33 == 0 and cannot be normalized")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= 1e-8:
        raise ValueError("homography is singular")
    return h


def warp_points(h, pts):
    """Apply h to an (N, 2) array of (x, y) points."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    if np.any(np.abs(w) <= 1e-8):
        raise PointAtInfinity("a point maps to infinity under the homography")
    return np.stack([(h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w,
                     (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w], axis=1)


def warp_point(h, p):
    return tuple(warp_points(h, [p])[0])


def translation(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def from_four_points(src, dst):
    """Exact homography mapping four src points onto four dst points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    sol = np.linalg.solve(a, b)
    return normalize(np.append(sol, 1.0).reshape(3, 3))


def random_corner_homography(rng, size, max_shift):
    """Perturb the corners of a size x size square independently, each
    uniformly inside a disc of radius ``max_shift``, and fit the exact map.

    ``size`` is (width, height).
    """
    w, h = size
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    r = max_shift * np.sqrt(rng.random(4))
    t = rng.uniform(0, 2 * np.pi, 4)
    moved = corners + np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    return from_four_points(corners, moved)


def inside(pts, w, h):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
