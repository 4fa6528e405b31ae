"""Sub-pixel refinement inside the 3x3 patch neighborhood of a coarse match."""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AAM, EncodedSet, aam_forward
from .features import PATCH
from .nn import MLP, Linear, Module
from .tensor import Tensor

MAX_OFFSET = PATCH / 2  # refined offsets live in (-4, 4) per axis
WINDOW = np.array([(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)])
NEG_INF = -1e9


@dataclass
class FineContext:
    desc_orig: np.ndarray   # (D,) keypoint descriptor sampled from image 1
    desc_post: np.ndarray   # (D,) same keypoint after the coarse attention stack
    neighbors: np.ndarray   # (9, D) image-2 grid features, row-major 3x3 window
    offsets: np.ndarray     # (9, 2) neighbor center minus matched center, px
    valid: np.ndarray       # (9,) False where the window leaves the grid

    def __post_init__(self):
        if not self.valid[4] or np.any(self.offsets[4] != 0):
            raise ValueError("the window center must be valid with zero offset")


def neighbor_window(patch_idx, rows, cols):
    """Index arithmetic for 3x3 windows around many patches at once.

    Returns (idx (K, 9), offsets (K, 9, 2), valid (K, 9)); cells outside the
    grid repeat the nearest in-grid cell and are marked invalid.
    """
    patch_idx = np.atleast_1d(np.asarray(patch_idx, dtype=np.int64))
    if patch_idx.size and (patch_idx.min() < 0 or patch_idx.max() >= rows * cols):
        raise IndexError(f"patch index outside a {rows}x{cols} grid")
    r, c = np.divmod(patch_idx, cols)
    rr = r[:, None] + WINDOW[None, :, 0]
    cc = c[:, None] + WINDOW[None, :, 1]
    valid = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
    idx = np.clip(rr, 0, rows - 1) * cols + np.clip(cc, 0, cols - 1)
    offsets = np.broadcast_to(WINDOW[:, ::-1] * PATCH, idx.shape + (2,)).astype(np.float64)
    return idx, offsets, valid


def gather_neighbors(grid, patch_idx):
    """(neighbors (9, D), offsets (9, 2), valid (9,)) for one matched patch."""
    idx, offsets, valid = neighbor_window([patch_idx], grid.rows, grid.cols)
    feats = np.asarray(grid.features.data)[idx[0]]
    return feats, offsets[0], valid[0]


class FineModule(Module):
    """Fine attention stack over {projected original, projected post-coarse}
    queries and the nine neighbor descriptors, followed by a regression head.

    The head sees the softmax-weighted expectation of neighbor offsets and
    the refined query; its last layer starts at zero so an untrained module
    predicts no offset.
    """

    def __init__(self, d, depth, rng, pos_hidden=32, head_hidden=64):
        super().__init__()
        self.dim = d
        self.proj = Linear(d, d, rng, bias=False)
        self.pos = MLP((2, pos_hidden, d), rng)
        self.aam = AAM(d, depth, rng, with_ocl=False)
        self.head = MLP((2 + d, head_hidden, 2), rng, zero_last=True)

    def __call__(self, desc_orig, desc_post, neighbors, offsets, valid):
        return refine_batch(self, desc_orig, desc_post, neighbors, offsets, valid)


def refine_batch(fm, desc_orig, desc_post, neighbors, offsets, valid):
    """Offsets d* for K contexts at once -> Tensor (K, 2), each in (-4, 4).

    desc_orig, desc_post: (K, D) tensors; neighbors: (K, 9, D) tensor;
    offsets: (K, 9, 2) array in px; valid: (K, 9) bool.
    """
    k, d = desc_orig.shape
    offsets = np.asarray(offsets, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not valid[:, 4].all():
        raise ValueError("window center must be valid")
    q = T.concat_rows([T.reshape(fm.proj(desc_orig), (k, 1, d)),
                       T.reshape(fm.proj(desc_post), (k, 1, d))])
    n = T.add(neighbors, fm.pos(Tensor(offsets / PATCH)))
    qs, ns = aam_forward(EncodedSet(q), EncodedSet(n, mask=valid), fm.aam, require_ocl=False)
    flat = T.reshape(qs.features, (k, 2 * d))
    qr = T.add(T.slice_last(flat, 0, d), T.slice_last(flat, d, 2 * d))
    scores = T.reshape(T.matmul(ns.features, T.reshape(qr, (k, d, 1))), (k, 9))
    scores = T.scale(scores, 1.0 / math.sqrt(d))
    scores = T.add(scores, Tensor(np.where(valid, 0.0, NEG_INF)))
    w = T.softmax_rows(scores)
    expect = T.reshape(T.matmul(T.reshape(w, (k, 1, 9)), Tensor(offsets)), (k, 2))
    h = T.concat_last([T.scale(expect, 1.0 / PATCH), qr])
    out = T.scale(T.tanh(fm.head(h)), MAX_OFFSET)
    # tanh rounds to exactly +-1 in float32; keep the open interval. The
    # clamp only bites where tanh' already rounds to zero.
    edge = np.nextafter(out.dtype.type(MAX_OFFSET), out.dtype.type(0))
    np.clip(out.data, -edge, edge, out=out.data)
    return out


def refine(ctx, fm):
    """Single-context convenience wrapper around :func:`refine_batch`."""
    out = refine_batch(fm, Tensor(ctx.desc_orig[None]), Tensor(ctx.desc_post[None]),
                       Tensor(ctx.neighbors[None]), ctx.offsets[None], ctx.valid[None])
    return out.data[0].astype(np.float64)


def compose(center, offset):
    return (float(center[0]) + float(offset[0]), float(center[1]) + float(offset[1]))
