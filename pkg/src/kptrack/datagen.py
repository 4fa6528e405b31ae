"""Supervised pair generation.

Two sources:

* synthetic scenes of flat primitives (triangles, stars, quads, stripes)
  with a shaded cube in the middle; the background and the cube move by
  independent integer translations between the two frames;
* crops of a real image and of its random projective warp.

Pairs are written to disk as ``NNNNNN_a.ppm``, ``NNNNNN_b.ppm`` and
``NNNNNN_gt.csv`` plus a ``manifest.json``.
"""

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from . import geometry, kernels
from .corners import detect_corners, min_eigen_score, score_at
from .features import PATCH, patch_index
from .imageio import read_image, write_ppm


class DataError(ValueError):
    pass


@dataclass
class JitterParams:
    brightness: Tuple[float, float] = (0.0, 0.0)   # additive delta range
    contrast: Tuple[float, float] = (1.0, 1.0)     # scale range around 0.5
    noise: float = 0.0                             # per-pixel gaussian sigma

    def __post_init__(self):
        if self.contrast[0] < 0 or self.contrast[0] > self.contrast[1]:
            raise ValueError(f"bad contrast range {self.contrast}")
        if self.brightness[0] > self.brightness[1]:
            raise ValueError(f"bad brightness range {self.brightness}")
        if self.noise < 0:
            raise ValueError("noise sigma must be non-negative")


DEFAULT_JITTER = JitterParams((-0.1, 0.1), (0.8, 1.2), 0.01)


def apply_jitter(img, jp, rng_seed):
    """clamp(contrast * (img - 0.5) + 0.5 + brightness + noise, 0, 1)."""
    rng = np.random.default_rng(rng_seed)
    img = np.asarray(img, dtype=np.float64)
    b = rng.uniform(*jp.brightness)
    c = rng.uniform(*jp.contrast)
    noise = rng.normal(0.0, jp.noise, img.shape) if jp.noise > 0 else 0.0
    return np.clip(c * (img - 0.5) + 0.5 + b + noise, 0.0, 1.0)


@dataclass
class ScenePair:
    img1: np.ndarray
    img2: np.ndarray
    keypoints1: np.ndarray      # (M, 2)
    gt_positions2: np.ndarray   # (M, 2); meaningful only where not occluded
    occluded: np.ndarray        # (M,) bool
    gt_patch_index: np.ndarray  # (M,) int, -1 when occluded
    provenance: str             # "SYNTHETIC" or "WARPED"
    transform: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.img1.shape


def _labels(gt, occluded, h, w):
    idx = patch_index(gt, h // PATCH, w // PATCH)
    return np.where(occluded, -1, idx)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    bg_max: float = 16.0
    cube_max: float = 50.0
    n_shapes: Optional[int] = None   # default scales with image area
    cube_frac: Tuple[float, float] = (0.25, 0.35)
    min_contrast: float = 0.25
    m: int = 512                     # keypoint cap
    shape_radius: Optional[Tuple[float, float]] = None  # default scales with image size
    jitter: Optional[JitterParams] = None


@dataclass
class Shape:
    kind: str
    poly: np.ndarray   # (P, 2) vertices, background coordinates
    value: float


@dataclass
class Scene:
    height: int
    width: int
    background: float
    shapes: list
    cube_faces: list       # [(poly, value)] drawn in order
    cube_hull: np.ndarray  # convex silhouette
    cube_vertices: np.ndarray


def _contrasting(rng, ref, min_contrast):
    for _ in range(100):
        v = rng.uniform(0.0, 1.0)
        if all(abs(v - r) >= min_contrast for r in ref):
            return v
    return 1.0 - ref[0] if ref else 0.5


def _regular_star(cx, cy, r, rot, points=5, inner=0.45):
    ang = rot + np.arange(2 * points) * np.pi / points
    rad = np.where(np.arange(2 * points) % 2 == 0, r, r * inner)
    return np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)


def _make_shape(rng, kind, cx, cy, r):
    rot = rng.uniform(0, 2 * np.pi)
    if kind == "triangle":
        # roughly equilateral so no vertex is too acute to detect
        ang = rot + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.4, 0.4, 3)
        return np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], axis=1)
    if kind == "star":
        return _regular_star(cx, cy, r, rot)
    if kind == "quad":
        ang = rot + np.array([0, 0.5, 1.0, 1.5]) * np.pi + rng.uniform(-0.3, 0.3, 4)
        rad = r * rng.uniform(0.7, 1.0, 4)
        return np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)
    if kind == "stripe":
        half_l, half_w = r, max(r * rng.uniform(0.18, 0.3), 1.5)
        c, s = np.cos(rot), np.sin(rot)
        base = np.array([[-half_l, -half_w], [half_l, -half_w], [half_l, half_w], [-half_l, half_w]])
        return np.stack([cx + base[:, 0] * c - base[:, 1] * s,
                         cy + base[:, 0] * s + base[:, 1] * c], axis=1)
    raise ValueError(kind)


def _cube(rng, cfg, background):
    h, w = cfg.height, cfg.width
    side = rng.uniform(*cfg.cube_frac) * min(h, w)
    depth = side * rng.uniform(0.3, 0.45)
    sx = rng.choice([-1.0, 1.0])
    dx, dy = sx * depth, -depth
    cx, cy = w / 2 + rng.uniform(-2, 2), h / 2 + rng.uniform(-2, 2)
    # front face centered so that the whole silhouette sits around the center
    fx0 = cx - side / 2 - dx / 2
    fy0 = cy - side / 2 - dy / 2
    f = np.array([[fx0, fy0], [fx0 + side, fy0], [fx0 + side, fy0 + side], [fx0, fy0 + side]])
    b = f + np.array([dx, dy])
    top = np.array([f[0], b[0], b[1], f[1]])
    if sx > 0:
        side_face = np.array([f[1], b[1], b[2], f[2]])
        hull = np.array([f[0], b[0], b[1], b[2], f[2], f[3]])
        inner = f[1]
    else:
        side_face = np.array([f[0], b[0], b[3], f[3]])
        hull = np.array([b[0], b[1], f[1], f[2], f[3], b[3]])
        inner = f[0]
    shades = []
    for _ in range(3):
        shades.append(_contrasting(rng, [background] + shades, cfg.min_contrast * 0.6))
    faces = [(f, shades[0]), (top, shades[1]), (side_face, shades[2])]
    verts = np.vstack([hull, inner[None]])
    return faces, hull, verts


def make_scene(cfg, rng):
    h, w = cfg.height, cfg.width
    bg = rng.uniform(0.0, 1.0)
    n = cfg.n_shapes if cfg.n_shapes is not None else max(4, int(round(h * w / 300)))
    ext = cfg.bg_max + 4
    shapes = []
    circles = []
    kinds = ("triangle", "star", "quad", "stripe")
    r_lo, r_hi = cfg.shape_radius or (0.07 * min(h, w), 0.16 * min(h, w))
    for _ in range(n * 30):
        if len(shapes) >= n:
            break
        r = rng.uniform(max(r_lo, 4.0), max(r_hi, 6.0))
        cx = rng.uniform(-ext, w + ext)
        cy = rng.uniform(-ext, h + ext)
        if any((cx - ox) ** 2 + (cy - oy) ** 2 < (r + orr + 2.0) ** 2 for ox, oy, orr in circles):
            continue
        kind = kinds[rng.integers(len(kinds))]
        poly = _make_shape(rng, kind, cx, cy, r)
        circles.append((cx, cy, r))
        shapes.append(Shape(kind, poly, _contrasting(rng, [bg], cfg.min_contrast)))
    faces, hull, verts = _cube(rng, cfg, bg)
    return Scene(h, w, bg, shapes, faces, hull, verts)


def render_layers(scene, bg_shift, cube_shift):
    """Return (composite, background-only, cube mask, cube-only) renderings."""
    h, w = scene.height, scene.width
    t_bg = np.asarray(bg_shift, dtype=np.float64)
    t_cu = np.asarray(cube_shift, dtype=np.float64)
    bg = np.full((h, w), scene.background)
    for s in scene.shapes:
        bg[kernels.fill_polygon(s.poly + t_bg, h, w)] = s.value
    cube = np.full((h, w), np.nan)
    for poly, val in scene.cube_faces:
        cube[kernels.fill_polygon(poly + t_cu, h, w)] = val
    mask = ~np.isnan(cube)
    comp = np.where(mask, cube, bg)
    return comp, bg, mask, cube


def point_in_convex(poly, pts):
    """Inclusive point-in-convex-polygon test (either winding)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    poly = np.asarray(poly, dtype=np.float64)
    edge = np.roll(poly, -1, axis=0) - poly
    cross = (edge[None, :, 0] * (pts[:, 1:2] - poly[None, :, 1])
             - edge[None, :, 1] * (pts[:, 0:1] - poly[None, :, 0]))
    return np.all(cross >= 0, axis=1) | np.all(cross <= 0, axis=1)


def _dist_to_poly(poly, pts):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a
    t = np.clip(((pts[:, None, :] - a[None]) * ab[None]).sum(-1) / (ab * ab).sum(-1)[None], 0, 1)
    proj = a[None] + t[..., None] * ab[None]
    return np.sqrt(((pts[:, None, :] - proj) ** 2).sum(-1)).min(axis=1)


def _integer_disc(rng, radius):
    if radius <= 0:
        return np.zeros(2)
    while True:
        r = radius * np.sqrt(rng.random())
        t = rng.uniform(0, 2 * np.pi)
        v = np.round([r * np.cos(t), r * np.sin(t)])
        if np.hypot(*v) <= radius:
            return v


def synthetic_from_scene(scene, bg_shift, cube_shift, cfg, jitter_seed=None):
    """Build the labelled pair for given motions of background and cube."""
    h, w = scene.height, scene.width
    bg_shift = np.asarray(bg_shift, dtype=np.float64)
    cube_shift = np.asarray(cube_shift, dtype=np.float64)
    img1, _, _, _ = render_layers(scene, (0, 0), (0, 0))
    img2, _, _, _ = render_layers(scene, bg_shift, cube_shift)

    bg_pts = np.vstack([s.poly for s in scene.shapes]) if scene.shapes else np.zeros((0, 2))
    cube_pts = scene.cube_vertices
    pts = np.vstack([bg_pts, cube_pts])
    on_cube = np.r_[np.zeros(len(bg_pts), bool), np.ones(len(cube_pts), bool)]
    vis1 = geometry.inside(pts, w, h)
    # background corners hidden by, or touching, the cube in frame 1 are skipped
    near_cube = _dist_to_poly(scene.cube_hull, pts) <= 1.0
    hidden1 = ~on_cube & (point_in_convex(scene.cube_hull, pts) | near_cube)
    keep = vis1 & ~hidden1
    pts, on_cube = pts[keep], on_cube[keep]

    score = score_at(img1, pts)
    order = np.argsort(-score, kind="stable")[:cfg.m]
    pts, on_cube = pts[order], on_cube[order]

    gt = pts + np.where(on_cube[:, None], cube_shift, bg_shift)
    out2 = ~geometry.inside(gt, w, h)
    covered = ~on_cube & point_in_convex(scene.cube_hull + cube_shift, gt)
    occluded = out2 | covered
    if cfg.jitter is not None and jitter_seed is not None:
        img2 = apply_jitter(img2, cfg.jitter, jitter_seed)
    return ScenePair(img1, img2, pts, gt, occluded, _labels(gt, occluded, h, w), "SYNTHETIC",
                     {"bg_shift": bg_shift.tolist(), "cube_shift": cube_shift.tolist(),
                      "on_cube": on_cube.tolist()})


def gen_synthetic_pair(cfg, rng_seed, bg_shift=None, cube_shift=None):
    if cfg.height % PATCH or cfg.width % PATCH or cfg.height <= 0 or cfg.width <= 0:
        raise DataError(f"image size {cfg.height}x{cfg.width} must be a positive multiple of {PATCH}")
    rng = np.random.default_rng(rng_seed)
    scene = make_scene(cfg, rng)
    t_bg = _integer_disc(rng, cfg.bg_max) if bg_shift is None else bg_shift
    t_cu = _integer_disc(rng, cfg.cube_max) if cube_shift is None else cube_shift
    pair = synthetic_from_scene(scene, t_bg, t_cu, cfg, jitter_seed=rng.integers(2 ** 31))
    pair.transform["scene"] = scene
    return pair


# ---------------------------------------------------------------------------
# warped real images
# ---------------------------------------------------------------------------


@dataclass
class WarpConfig:
    crop: int = 256
    difficulty: float = 0.05   # max corner shift as a fraction of the crop size
    m: int = 512
    m_min: int = 16
    candidates: int = 8
    jitter: Optional[JitterParams] = None


DIFFICULTY = {"easy": 0.05, "hard": 0.15}


def warp_image(src, h_mat, origin, size):
    """Render the crop of ``src`` warped by h_mat (crop coords -> crop coords).

    Pixel q of the output samples src at H^-1(q) + origin; outside reads 0.
    """
    w, hgt = size
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(hgt) + 0.5)
    back = geometry.warp_points(np.linalg.inv(h_mat), np.stack([jj.ravel(), ii.ravel()], axis=1))
    xs = back[:, 0] + origin[0]
    ys = back[:, 1] + origin[1]
    return kernels.sample_image(src, xs, ys, 0.0).reshape(hgt, w)


def _pick_region(src, crop, rng, candidates):
    h, w = src.shape
    score = min_eigen_score(src)
    strong = score > 0.05 * max(score.max(), 1e-12)
    integral = np.pad(np.cumsum(np.cumsum(strong, 0), 1), ((1, 0), (1, 0)))
    best, best_n = None, -1
    for _ in range(max(candidates, 1)):
        x0 = int(rng.integers(0, w - crop + 1))
        y0 = int(rng.integers(0, h - crop + 1))
        n = (integral[y0 + crop, x0 + crop] - integral[y0, x0 + crop]
             - integral[y0 + crop, x0] + integral[y0, x0])
        if n > best_n:
            best, best_n = (x0, y0), n
    return best


def gen_warped_pair(img, cfg, rng_seed, homography=None):
    src = np.asarray(img, dtype=np.float64)
    if src.ndim != 2:
        raise DataError("source image must be grayscale")
    c = cfg.crop
    if c % PATCH:
        raise DataError(f"crop size {c} must be a multiple of {PATCH}")
    if src.shape[0] < c or src.shape[1] < c:
        raise DataError(f"source image {src.shape} is smaller than the {c}px crop")
    rng = np.random.default_rng(rng_seed)
    x0, y0 = _pick_region(src, c, rng, cfg.candidates)
    if homography is None:
        hm = geometry.random_corner_homography(rng, (c, c), cfg.difficulty * c)
    else:
        hm = geometry.normalize(homography)
    img1 = src[y0:y0 + c, x0:x0 + c].copy()
    img2 = warp_image(src, hm, (x0, y0), (c, c))
    kps, _ = detect_corners(img1, cfg.m)
    if len(kps) < cfg.m_min:
        raise DataError(f"only {len(kps)} corners found, need at least {cfg.m_min}")
    gt = geometry.warp_points(hm, kps)
    occluded = ~geometry.inside(gt, c, c)
    if cfg.jitter is not None:
        img2 = apply_jitter(img2, cfg.jitter, rng.integers(2 ** 31))
    return ScenePair(img1, img2, kps, gt, occluded, _labels(gt, occluded, c, c), "WARPED",
                     {"homography": hm.tolist(), "origin": [x0, y0]})


def procedural_source(size, seed):
    """A cluttered grayscale image used when no photo folder is supplied."""
    h, w = size
    cfg = SynthConfig(height=h, width=w, bg_max=0, n_shapes=max(8, h * w // 200),
                      cube_frac=(0.15, 0.2), shape_radius=(4.0, 11.0))
    rng = np.random.default_rng(seed)
    scene = make_scene(cfg, rng)
    img, _, _, _ = render_layers(scene, (0, 0), (0, 0))
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    shade = 0.15 * np.sin(2 * np.pi * (xx * rng.uniform(0.5, 2) + yy * rng.uniform(0.5, 2)))
    return np.clip(img + shade, 0, 1)


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------


def _config_dict(cfg):
    d = dataclasses.asdict(cfg)
    return json.loads(json.dumps(d, default=list))


def config_hash(kind, cfg):
    blob = json.dumps({"kind": kind, "config": _config_dict(cfg)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_pair(out_dir, i, pair):
    out_dir = Path(out_dir)
    write_ppm(out_dir / f"{i:06d}_a.ppm", pair.img1)
    write_ppm(out_dir / f"{i:06d}_b.ppm", pair.img2)
    with open(out_dir / f"{i:06d}_gt.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["x1", "y1", "x2", "y2", "occluded"])
        for (x1, y1), (x2, y2), o in zip(pair.keypoints1, pair.gt_positions2, pair.occluded):
            wr.writerow([repr(float(x1)), repr(float(y1)), repr(float(x2)), repr(float(y2)), int(o)])


def generate_dataset(kind, cfg, out_dir, count, seed=0, sources=None):
    """Write ``count`` pairs; pair i uses seed ``seed + i``.

    ``sources`` is a list of grayscale images for ``kind == 'warp'``; when
    None, procedural sources are synthesized per pair.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = []
    for i in range(count):
        s = seed + i
        if kind == "synth":
            pair = gen_synthetic_pair(cfg, s)
        elif kind == "warp":
            if sources:
                src = sources[i % len(sources)]
            else:
                side = max(cfg.crop * 3 // 2, cfg.crop + 16)
                src = procedural_source((side, side), s)
            pair = gen_warped_pair(src, cfg, s)
        else:
            raise ValueError(f"unknown dataset kind {kind!r}")
        write_pair(out_dir, i, pair)
        seeds.append(s)
    manifest = {"kind": kind, "count": count, "seeds": seeds,
                "config": _config_dict(cfg), "config_hash": config_hash(kind, cfg)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


@dataclass
class PairRecord:
    img1: np.ndarray
    img2: np.ndarray
    keypoints1: np.ndarray
    gt_positions2: np.ndarray
    occluded: np.ndarray

    @property
    def gt_patch_index(self):
        h, w = self.img1.shape
        return _labels(self.gt_positions2, self.occluded, h, w)


def read_pair(data_dir, i):
    data_dir = Path(data_dir)
    img1 = read_image(data_dir / f"{i:06d}_a.ppm")
    img2 = read_image(data_dir / f"{i:06d}_b.ppm")
    rows = np.loadtxt(data_dir / f"{i:06d}_gt.csv", delimiter=",", skiprows=1, ndmin=2)
    if rows.size == 0:
        rows = np.zeros((0, 5))
    return PairRecord(img1, img2, rows[:, 0:2], rows[:, 2:4], rows[:, 4].astype(bool))


def read_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{data_dir}: no manifest.json")
    return json.loads(path.read_text())


def load_dataset(data_dir):
    man = read_manifest(data_dir)
    return [read_pair(data_dir, i) for i in range(man["count"])]
