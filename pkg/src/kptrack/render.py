"""Side-by-side match visualization."""

import numpy as np

from .coarse import Verdict
from .evaluate import CORRECT_RADIUS
from .imageio import write_image

GREEN = (0.0, 1.0, 0.0)
RED = (1.0, 0.0, 0.0)
BLUE = (0.0, 0.0, 1.0)
GUTTER = 8


def draw_line(canvas, p0, p1, color):
    """Plot a segment by dense sampling; endpoints are pixel-center coordinates."""
    h, w = canvas.shape[:2]
    p0 = np.asarray(p0, dtype=np.float64) - 0.5
    p1 = np.asarray(p1, dtype=np.float64) - 0.5
    n = int(np.ceil(np.abs(p1 - p0).max())) + 1
    t = np.linspace(0.0, 1.0, n)
    xs = np.rint(p0[0] + t * (p1[0] - p0[0])).astype(int)
    ys = np.rint(p0[1] + t * (p1[1] - p0[1])).astype(int)
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    canvas[ys[ok], xs[ok]] = color


def draw_cross(canvas, p, color, r=2):
    x, y = p
    draw_line(canvas, (x - r, y), (x + r, y), color)
    draw_line(canvas, (x, y - r), (x, y + r), color)


def compose(img1, img2, gutter=GUTTER):
    img1 = np.asarray(img1, dtype=np.float64)
    img2 = np.asarray(img2, dtype=np.float64)
    if img1.shape[0] != img2.shape[0]:
        raise ValueError("images must have the same height")
    h, w1 = img1.shape[:2]
    w2 = img2.shape[1]
    canvas = np.ones((h, w1 + gutter + w2, 3))
    canvas[:, :w1] = img1[..., None] if img1.ndim == 2 else img1
    canvas[:, w1 + gutter:] = img2[..., None] if img2.ndim == 2 else img2
    return canvas


def render_matches(pair, results, out_path=None, gutter=GUTTER, radius=CORRECT_RADIUS):
    """Composite of both images with one segment per emitted match.

    Green: within ``radius`` of ground truth; red: otherwise (or gt occluded);
    blue cross on the left image: predicted occluded. Rejected points are
    not drawn. Returns the RGB canvas and writes it when ``out_path`` is set.
    """
    canvas = compose(pair.img1, pair.img2, gutter)
    shift = np.array([pair.img1.shape[1] + gutter, 0.0])
    gt = np.asarray(pair.gt_positions2, dtype=np.float64)
    occ = np.asarray(pair.occluded, dtype=bool)
    kps = np.asarray(pair.keypoints1, dtype=np.float64)
    for r in results:
        i = r.index
        if r.verdict == Verdict.OCCLUDED:
            draw_cross(canvas, kps[i], BLUE)
        elif r.verdict == Verdict.PATCH:
            ok = not occ[i] and np.hypot(*(np.asarray(r.position) - gt[i])) < radius
            draw_line(canvas, kps[i], np.asarray(r.position) + shift, GREEN if ok else RED)
    if out_path is not None:
        write_image(out_path, canvas)
    return canvas
