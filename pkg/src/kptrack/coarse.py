"""Similarity matrix against all patches plus OCL, and per-keypoint verdicts."""

import enum
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .features import patch_centers
from .tensor import ShapeError

DEFAULT_THRESHOLD = 0.2


class Verdict(enum.Enum):
    PATCH = "PATCH"
    OCCLUDED = "OCCLUDED"
    REJECTED = "REJECTED"


@dataclass
class CoarseMatch:
    index: int
    verdict: Verdict
    confidence: float
    patch: Optional[int] = None
    center: Optional[Tuple[float, float]] = None


def similarity(f1, f2):
    """Scaled dot products <f1_i, f2_j> / sqrt(D); last column is the OCL token.

    Works on (M, D) x (C, D) or batched (B, M, D) x (B, C, D) tensors.
    """
    if f1.shape[-1] != f2.shape[-1]:
        raise ShapeError(f"similarity: feature dims {f1.shape[-1]} and {f2.shape[-1]} differ")
    d = f1.shape[-1]
    return T.scale(T.matmul(f1, T.transpose(f2)), 1.0 / math.sqrt(d))


def softmax_np(s):
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def classify_arrays(scores, threshold=DEFAULT_THRESHOLD):
    """Vectorized verdicts: returns (best column, confidence, code).

    code is 0 for PATCH, 1 for OCCLUDED, 2 for REJECTED; the OCL column is
    the last one and takes precedence over the threshold.
    """
    if not 0 <= threshold < 1:
        raise ValueError(f"threshold must lie in [0, 1), got {threshold}")
    p = softmax_np(scores)
    best = p.argmax(axis=-1)
    conf = np.take_along_axis(p, best[..., None], axis=-1)[..., 0]
    ocl = scores.shape[-1] - 1
    code = np.where(best == ocl, 1, np.where(conf < threshold, 2, 0))
    return best, conf, code


def classify(scores, threshold=DEFAULT_THRESHOLD, grid_shape=None):
    """One :class:`CoarseMatch` per row of an (M, C) similarity matrix.

    ``grid_shape`` is (rows, cols); when omitted the grid is assumed square.
    """
    scores = np.asarray(getattr(scores, "data", scores), dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"classify expects an (M, C) matrix, got {scores.shape}")
    n_patches = scores.shape[1] - 1
    if grid_shape is None:
        side = int(round(math.sqrt(n_patches)))
        grid_shape = (side, side)
    rows, cols = grid_shape
    if rows * cols != n_patches:
        raise ShapeError(f"similarity has {n_patches} patch columns, grid {rows}x{cols}")
    centers = patch_centers(rows, cols)
    best, conf, code = classify_arrays(scores, threshold)
    out = []
    for i in range(scores.shape[0]):
        if code[i] == 1:
            out.append(CoarseMatch(i, Verdict.OCCLUDED, float(conf[i])))
        elif code[i] == 2:
            out.append(CoarseMatch(i, Verdict.REJECTED, float(conf[i])))
        else:
            j = int(best[i])
            out.append(CoarseMatch(i, Verdict.PATCH, float(conf[i]), j, tuple(centers[j])))
    return out


def imbalance_ratio(m, h, w, occluded_fraction):
    """Chance that a keypoint lands in any one specific patch class:
    (1 - occluded_fraction) * M * 64 / (H * W)."""
    if h * w <= 0:
        raise ValueError("image area must be positive")
    return (1.0 - occluded_fraction) * m * 64.0 / (h * w)
