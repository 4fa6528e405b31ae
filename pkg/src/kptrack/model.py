"""The full tracker: extractor, positional encoding, coarse stack, fine module."""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .attention import AAM, EncodedSet, aam_forward, append_ocl, encode_positions
from .coarse import DEFAULT_THRESHOLD, Verdict, classify_arrays, similarity
from .features import PATCH, FeatureExtractor, patch_centers, sample_descriptors_batch
from .fine import FineModule, neighbor_window
from .nn import MLP, Module, load_checkpoint, save_checkpoint
from .tensor import Tensor


@dataclass
class ModelConfig:
    dim: int = 64
    coarse_depth: int = 4
    fine_depth: int = 2
    pos_hidden: Tuple[int, ...] = (32, 64)
    seed: int = 0


@dataclass
class TrackResult:
    index: int
    verdict: Verdict
    confidence: float
    position: Optional[Tuple[float, float]] = None  # refined when the fine module ran
    coarse_center: Optional[Tuple[float, float]] = None
    patch: Optional[int] = None  # argmax patch class; None when OCL wins


@dataclass
class CoarseOutput:
    scores: Tensor          # (B, M, C)
    desc1: Tensor           # (B, M, D) raw sampled descriptors
    f1: Tensor              # (B, M, D) after the coarse stack
    grid2: Tensor           # (B, N, D) raw image-2 features
    rows: int
    cols: int


class Tracker(Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.extractor = FeatureExtractor(cfg.dim, rng=rng)
        self.posenc = MLP((2,) + tuple(cfg.pos_hidden) + (cfg.dim,), rng)
        self.aam = AAM(cfg.dim, cfg.coarse_depth, rng)
        self.fine = FineModule(cfg.dim, cfg.fine_depth, rng)
        self.completed_stage = 0

    def coarse_parameters(self):
        return [(k, p) for k, p in self.named_parameters() if not k.startswith("fine.")]

    def fine_parameters(self):
        return [(k, p) for k, p in self.named_parameters() if k.startswith("fine.")]

    # -- forward -----------------------------------------------------------

    def coarse(self, img1, img2, kps, counts):
        """img1, img2: (B, H, W); kps: (B, M, 2) padded; counts: (B,)."""
        img1 = np.asarray(img1)
        img2 = np.asarray(img2)
        bsz, h, w = img1.shape
        rows, cols = h // PATCH, w // PATCH
        feats = self.extractor(np.concatenate([img1, img2], axis=0))
        grid1 = T.slice_first(feats, 0, bsz)
        grid2 = T.slice_first(feats, bsz, 2 * bsz)
        m = kps.shape[1]
        mask1 = np.arange(m)[None, :] < np.asarray(counts)[:, None]
        desc1 = sample_descriptors_batch(grid1, kps, counts, rows, cols)
        f1 = encode_positions(desc1, np.where(mask1[..., None], kps, 0.0), self.posenc, (h, w))
        centers = np.broadcast_to(patch_centers(rows, cols), (bsz, rows * cols, 2))
        f2 = encode_positions(grid2, centers, self.posenc, (h, w))
        s1 = EncodedSet(f1, mask=mask1)
        s2 = append_ocl(EncodedSet(f2), self.aam.ocl)
        o1, o2 = aam_forward(s1, s2, self.aam)
        return CoarseOutput(similarity(o1.features, o2.features), desc1, o1.features,
                            grid2, rows, cols)

    def refine_points(self, out, batch_idx, point_idx, patch_idx):
        """Fine offsets for selected (batch, keypoint) pairs matched to patches."""
        d = self.cfg.dim
        bsz, m = out.f1.shape[:2]
        n = out.rows * out.cols
        sel = np.asarray(batch_idx) * m + np.asarray(point_idx)
        desc_orig = T.gather_rows(T.reshape(out.desc1, (bsz * m, d)), sel)
        desc_post = T.gather_rows(T.reshape(out.f1, (bsz * m, d)), sel)
        idx, offsets, valid = neighbor_window(patch_idx, out.rows, out.cols)
        idx = idx + (np.asarray(batch_idx) * n)[:, None]
        k = len(sel)
        neigh = T.reshape(T.gather_rows(T.reshape(out.grid2, (bsz * n, d)), idx.reshape(-1)),
                          (k, 9, d))
        return self.fine(desc_orig, desc_post, neigh, offsets, valid)

    def track(self, img1, img2, keypoints, threshold=DEFAULT_THRESHOLD, use_fine=True):
        """Track keypoints from img1 into img2. Returns one TrackResult per keypoint."""
        kps = np.asarray(keypoints, dtype=np.float64).reshape(1, -1, 2)
        with T.no_grad():
            out = self.coarse(np.asarray(img1)[None], np.asarray(img2)[None], kps, [kps.shape[1]])
            scores = out.scores.data[0]
            best, conf, code = classify_arrays(scores, threshold)
            centers = patch_centers(out.rows, out.cols)
            matched = np.nonzero(code == 0)[0]
            offsets = np.zeros((len(matched), 2))
            if use_fine and len(matched):
                offsets = self.refine_points(out, np.zeros(len(matched), dtype=np.int64),
                                             matched, best[matched]).data.astype(np.float64)
        results = []
        k = 0
        for i in range(kps.shape[1]):
            if code[i] == 1:
                results.append(TrackResult(i, Verdict.OCCLUDED, float(conf[i])))
            elif code[i] == 2:
                results.append(TrackResult(i, Verdict.REJECTED, float(conf[i]),
                                           patch=int(best[i])))
            else:
                c = centers[best[i]]
                p = c + offsets[k]
                k += 1
                results.append(TrackResult(i, Verdict.PATCH, float(conf[i]),
                                           (float(p[0]), float(p[1])), (float(c[0]), float(c[1])),
                                           int(best[i])))
        return results

    # -- persistence -------------------------------------------------------

    def save(self, path, stage=None, extra=None):
        state = self.state_dict()
        meta = {"meta.dim": [self.cfg.dim], "meta.coarse_depth": [self.cfg.coarse_depth],
                "meta.fine_depth": [self.cfg.fine_depth],
                "meta.pos_hidden": list(self.cfg.pos_hidden)}
        if stage is not None:
            meta["meta.stage"] = [stage]
        meta.update(extra or {})
        for k, v in meta.items():
            state[k] = np.asarray(v, dtype=np.float32)
        save_checkpoint(path, state)

    @classmethod
    def load(cls, path):
        state = load_checkpoint(path)
        try:
            cfg = ModelConfig(dim=int(state["meta.dim"][0]),
                              coarse_depth=int(state["meta.coarse_depth"][0]),
                              fine_depth=int(state["meta.fine_depth"][0]),
                              pos_hidden=tuple(int(v) for v in state["meta.pos_hidden"]))
        except KeyError as e:
            raise ValueError(f"{path}: checkpoint lacks model metadata {e}") from None
        model = cls(cfg)
        model.load_state_dict(state)
        model.completed_stage = int(state["meta.stage"][0]) if "meta.stage" in state else 0
        return model, state
