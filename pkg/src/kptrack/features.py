"""Dense 1/8-resolution features and bilinear keypoint descriptors."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .nn import Module, ModuleList, parameter, uniform_init
from .tensor import Tensor

PATCH = 8


class InputError(ValueError):
    """Image or keypoints violate the input contract."""


def check_image(img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise InputError(f"expected a 2-D grayscale image, got shape {img.shape}")
    h, w = img.shape
    if h % PATCH or w % PATCH:
        raise InputError(f"image size {h}x{w} is not divisible by {PATCH}")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise InputError("pixel values must lie in [0, 1]")
    return img


def patch_centers(rows, cols):
    """(rows*cols, 2) array of (x, y) = (8c + 4, 8r + 4), row-major."""
    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.stack([PATCH * c + PATCH / 2, PATCH * r + PATCH / 2], axis=1).astype(np.float64)


def patch_index(positions, rows, cols):
    """Row-major index of the grid cell containing each (x, y) position."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    c = np.clip(np.floor(p[:, 0] / PATCH).astype(np.int64), 0, cols - 1)
    r = np.clip(np.floor(p[:, 1] / PATCH).astype(np.int64), 0, rows - 1)
    return r * cols + c


@dataclass
class DenseFeatureGrid:
    rows: int
    cols: int
    features: Tensor  # (rows * cols, D), row-major over the grid

    @property
    def dim(self):
        return self.features.shape[-1]

    @property
    def centers(self):
        return patch_centers(self.rows, self.cols).reshape(self.rows, self.cols, 2)

    @property
    def image_size(self):
        return self.rows * PATCH, self.cols * PATCH


def conv3x3(x, w, b, stride):
    """3x3 convolution, zero padding 1, NHWC input, weight (9*C_in, C_out)."""
    bsz, h, wd, c = x.shape
    if w.shape[0] != 9 * c:
        raise T.ShapeError(f"conv3x3: weight {w.shape} does not fit {c} input channels")
    cols = kernels.im2col(x.data, stride)
    ho, wo = kernels.conv_out_size(h, stride), kernels.conv_out_size(wd, stride)
    in_shape = x.shape
    wd_ = w.data

    def bw(g):
        gc = g.reshape(-1, g.shape[-1])
        gx = kernels.col2im(gc @ wd_.T, in_shape, stride) if x.requires_grad else None
        gw = cols.T @ gc if w.requires_grad else None
        return gx, gw

    out = T.make_op((cols @ wd_).reshape(bsz, ho, wo, w.shape[1]), (x, w), bw)
    return T.add_bias(out, b)


class ConvBlock(Module):
    def __init__(self, c_in, c_out, stride, rng):
        super().__init__()
        self.stride = stride
        self.weight = parameter(uniform_init(rng, 9 * c_in, (9 * c_in, c_out)))
        self.bias = parameter(uniform_init(rng, 9 * c_in, (c_out,)))

    def __call__(self, x):
        return conv3x3(x, self.weight, self.bias, self.stride)


class FeatureExtractor(Module):
    """Four 3x3 conv blocks: three stride-2 stages then one stride-1 head.

    Maps (B, H, W) grayscale batches to (B, H/8 * W/8, D) descriptors.
    """

    def __init__(self, dim=64, widths=(16, 32, 64), rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        chans = (1,) + tuple(widths)
        blocks = [ConvBlock(chans[i], chans[i + 1], 2, rng) for i in range(3)]
        blocks.append(ConvBlock(chans[3], dim, 1, rng))
        self.blocks = ModuleList(blocks)
        self.dim = dim

    def __call__(self, images):
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        bsz, h, w = images.shape
        if h % PATCH or w % PATCH:
            raise InputError(f"image size {h}x{w} is not divisible by {PATCH}")
        x = Tensor((images - 0.5)[..., None])
        n = len(self.blocks)
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i < n - 1:
                x = T.relu(x)
        return T.reshape(x, (bsz, (h // PATCH) * (w // PATCH), self.dim))


def extract_dense(img, extractor):
    """Run the extractor on one image and wrap the result with its geometry."""
    img = check_image(img)
    feats = extractor(img[None])
    h, w = img.shape
    return DenseFeatureGrid(h // PATCH, w // PATCH, T.reshape(feats, feats.shape[1:]))


def bilinear_weights(p, cell):
    """Weights (tl, tr, bl, br) that blend the four cell corners into ``p``.

    ``cell`` lists the corner positions in that order for an axis-aligned
    cell. Raises ValueError if ``p`` is outside the cell.
    """
    cell = np.asarray(cell, dtype=np.float64)
    x, y = map(float, p)
    x0, y0 = cell[0]
    x1, y1 = cell[3]
    u = (x - x0) / (x1 - x0)
    v = (y - y0) / (y1 - y0)
    tol = 1e-9
    if not (-tol <= u <= 1 + tol and -tol <= v <= 1 + tol):
        raise ValueError(f"point {(x, y)} lies outside the cell {cell.tolist()}")
    u = min(max(u, 0.0), 1.0)
    v = min(max(v, 0.0), 1.0)
    return np.array([(1 - u) * (1 - v), u * (1 - v), (1 - u) * v, u * v])


def bilinear_cells(positions, rows, cols):
    """Corner indices (K, 4) and weights (K, 4) on the patch-center lattice.

    Positions outside the lattice hull are clamped onto it first, so border
    keypoints reuse the nearest interpolation cell.
    """
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    u = np.clip((p[:, 0] - PATCH / 2) / PATCH, 0, cols - 1)
    v = np.clip((p[:, 1] - PATCH / 2) / PATCH, 0, rows - 1)
    c0 = np.minimum(np.floor(u).astype(np.int64), max(cols - 2, 0))
    r0 = np.minimum(np.floor(v).astype(np.int64), max(rows - 2, 0))
    fu = u - c0
    fv = v - r0
    c1 = np.minimum(c0 + 1, cols - 1)
    r1 = np.minimum(r0 + 1, rows - 1)
    idx = np.stack([r0 * cols + c0, r0 * cols + c1, r1 * cols + c0, r1 * cols + c1], axis=1)
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    return idx, w


def check_keypoints(positions, h, w):
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    bad = ~((p[:, 0] >= 0) & (p[:, 0] < w) & (p[:, 1] >= 0) & (p[:, 1] < h))
    if bad.any():
        i = int(np.argmax(bad))
        raise InputError(f"keypoint {i} at {tuple(p[i])} is outside the {w}x{h} image")
    return p


def sample_descriptors(grid, positions):
    """Bilinearly interpolate grid features at keypoint positions -> (M, D)."""
    h, w = grid.image_size
    p = check_keypoints(positions, h, w)
    idx, wts = bilinear_cells(p, grid.rows, grid.cols)
    return T.gather_rows(grid.features, idx, wts)


def sample_descriptors_batch(features, positions, counts, rows, cols):
    """Batched sampling.

    ``features`` is (B, rows*cols, D); ``positions`` is (B, M, 2) padded;
    only the first ``counts[b]`` rows of batch b are checked. Returns a
    (B, M, D) tensor (padding rows sample position (0, 0)).
    """
    bsz, m, _ = positions.shape
    n = rows * cols
    flat = T.reshape(features, (bsz * n, features.shape[-1]))
    pos = np.array(positions, dtype=np.float64)
    for b in range(bsz):
        check_keypoints(pos[b, :counts[b]], rows * PATCH, cols * PATCH)
        pos[b, counts[b]:] = 0
    idx, wts = bilinear_cells(pos.reshape(-1, 2), rows, cols)
    idx = idx + (np.repeat(np.arange(bsz), m) * n)[:, None]
    out = T.gather_rows(flat, idx, wts)
    return T.reshape(out, (bsz, m, features.shape[-1]))
