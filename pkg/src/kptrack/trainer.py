"""Four-stage training curriculum.

1. SYNTH_NO_OCC: synthetic pairs, occluded points dropped, CE + small L2
   on softmax-expected patch centers.
2. SYNTH_OCC: same data, occluded points labelled with the OCL class, CE.
3. REAL: warped real-image pairs, CE.
4. FINE: coarse weights frozen, offset regression for the fine module.
"""

import csv
import dataclasses
import enum
import logging
import math
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from . import config
from . import tensor as T
from .coarse import imbalance_ratio
from .datagen import PairRecord, load_dataset
from .features import PATCH, patch_centers, patch_index
from .model import ModelConfig, Tracker
from .nn import Adam, save_checkpoint

log = logging.getLogger(__name__)


class StageId(enum.IntEnum):
    SYNTH_NO_OCC = 1
    SYNTH_OCC = 2
    REAL = 3
    FINE = 4

    @property
    def cli_name(self):
        return {1: "synth1", 2: "synth2", 3: "real", 4: "fine"}[int(self)]

    @classmethod
    def parse(cls, name):
        table = {"synth1": cls.SYNTH_NO_OCC, "synth2": cls.SYNTH_OCC, "real": cls.REAL,
                 "fine": cls.FINE}
        try:
            return table[str(name).lower()]
        except KeyError:
            raise ValueError(f"unknown stage {name!r}; choose from {sorted(table)}") from None


# minimum completed stage required in the input checkpoint
PREREQUISITE = {StageId.SYNTH_NO_OCC: 0, StageId.SYNTH_OCC: 1, StageId.REAL: 2, StageId.FINE: 2}


class CurriculumError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps_synth1: int = 3000
    steps_synth2: int = 3000
    steps_real: int = 5000
    steps_fine: int = 3000
    lr: float = 1e-3
    threshold: float = 0.2
    l2_weight: float = 0.1
    max_keypoints: int = 64
    data_synth: str = ""
    data_real: str = ""
    out: str = "checkpoint.trkf"
    log: str = ""
    log_every: int = 50
    seed: int = 0
    augment: bool = True
    prefetch: int = 0
    dim: int = 64
    coarse_depth: int = 4
    fine_depth: int = 2
    occ_fraction_min: float = 0.02
    occ_fraction_max: float = 0.8
    fine_target_clip: float = 3.9

    def __post_init__(self):
        for name in ("batch_size", "max_keypoints", "log_every", "dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("steps_synth1", "steps_synth2", "steps_real", "steps_fine", "prefetch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def steps_for(self, stage):
        return getattr(self, f"steps_{stage.cli_name}")

    def data_for(self, stage):
        return self.data_real if stage == StageId.REAL else self.data_synth


def parse_config(text):
    """Flat ``key = value`` lines; '#' starts a comment."""
    return config.build(TrainConfig, config.parse_pairs(text))


def load_config(path):
    cfg = parse_config(Path(path).read_text())
    base = Path(path).resolve().parent
    for key in ("data_synth", "data_real", "out", "log"):
        val = getattr(cfg, key)
        if val and not Path(val).is_absolute():
            setattr(cfg, key, str(base / val))
    return cfg


@dataclass
class LossReport:
    stage: StageId
    step: int
    cel: float
    l2: Optional[float]
    acc: float
    occ_recall: Optional[float]


# ---------------------------------------------------------------------------
# targets and losses
# ---------------------------------------------------------------------------


def coarse_targets(pair, grid_shape, stage):
    """Class index per keypoint and the indices of the keypoints kept.

    Visible points get their ground-truth patch; occluded points get the
    OCL class (rows*cols) from SYNTH_OCC on and are dropped in SYNTH_NO_OCC.
    """
    rows, cols = grid_shape
    h, w = pair.img1.shape
    if (h // PATCH, w // PATCH) != (rows, cols):
        raise ValueError(f"grid {grid_shape} does not match a {h}x{w} image")
    labels = np.asarray(pair.gt_patch_index)
    occ = np.asarray(pair.occluded, dtype=bool)
    if np.any((labels < 0) != occ):
        raise ValueError("patch labels and occlusion flags disagree")
    if stage == StageId.SYNTH_NO_OCC:
        keep = np.nonzero(~occ)[0]
        return labels[keep], keep
    y = np.where(occ, rows * cols, labels)
    return y, np.arange(len(y))


def expected_centers(scores, rows, cols):
    """Softmax over patch columns (OCL excluded) times patch centers, in patch units."""
    n = rows * cols
    p = T.softmax_rows(T.slice_last(scores, 0, n))
    centers = T.Tensor(patch_centers(rows, cols) / PATCH)
    b, m, _ = scores.shape
    flat = T.reshape(p, (b * m, n))
    return T.reshape(T.matmul(flat, centers), (b, m, 2))


def masked_mse(pred, target, mask):
    """Mean over masked rows of the squared error summed over the last axis."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("masked_mse: empty mask")
    diff = T.sub(pred, T.Tensor(np.where(mask[..., None], target, 0.0)))
    diff = T.mul(diff, T.Tensor(np.broadcast_to(mask[..., None], pred.shape).astype(np.float64)))
    return T.scale(T.sum_all(T.square(diff)), 1.0 / n)


def stage_loss(stage, scores=None, targets=None, predicted=None, gt=None, mask=None,
               l2_weight=0.1):
    """Scalar loss for one batch.

    SYNTH_NO_OCC: CE(scores, targets) + l2_weight * L2(predicted, gt), with
    positions in patch units and ``mask`` selecting supervised rows.
    SYNTH_OCC / REAL: CE only. FINE: mean squared error between predicted
    and gt offsets (per component).
    """
    stage = StageId(stage)
    if stage == StageId.FINE:
        if predicted is None or gt is None or scores is not None:
            raise ValueError("FINE loss takes predicted and gt offsets only")
        gt = np.asarray(gt, dtype=np.float64)
        if gt.shape != predicted.shape:
            raise ValueError(f"FINE loss: predicted {predicted.shape} vs gt {gt.shape}")
        diff = T.sub(predicted, T.Tensor(gt))
        return T.mean_all(T.square(diff))
    if scores is None or targets is None:
        raise ValueError(f"{stage.name} loss needs scores and targets")
    ce = T.cross_entropy(scores, targets)
    if stage != StageId.SYNTH_NO_OCC:
        if predicted is not None:
            raise ValueError(f"{stage.name} loss is cross-entropy only")
        return ce
    if predicted is None or gt is None:
        raise ValueError("SYNTH_NO_OCC loss needs predicted and gt positions")
    if mask is None:
        mask = np.asarray(targets) >= 0
    return T.add(ce, T.scale(masked_mse(predicted, gt, mask), l2_weight))


def fine_targets(pred_patch, gt_pos, occluded, rows, cols, clip=3.9):
    """Offset targets for points whose coarse patch is the true one or adjacent.

    Returns (selected indices, targets (K, 2)). Targets are clipped into
    the open range the fine head can produce.
    """
    pred_patch = np.asarray(pred_patch)
    n = rows * cols
    gt_pos = np.asarray(gt_pos, dtype=np.float64).reshape(-1, 2)
    gcol = np.clip(np.floor(gt_pos[:, 0] / PATCH), 0, cols - 1)
    grow = np.clip(np.floor(gt_pos[:, 1] / PATCH), 0, rows - 1)
    prow, pcol = np.divmod(np.minimum(pred_patch, n - 1), cols)
    near = (np.abs(prow - grow) <= 1) & (np.abs(pcol - gcol) <= 1)
    sel = np.nonzero(near & (pred_patch < n) & ~np.asarray(occluded, dtype=bool))[0]
    centers = patch_centers(rows, cols)[pred_patch[sel]]
    return sel, np.clip(gt_pos[sel] - centers, -clip, clip)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    img1: np.ndarray
    img2: np.ndarray
    kps: np.ndarray       # (B, M, 2)
    counts: np.ndarray    # (B,)
    targets: np.ndarray   # (B, M) class index, -1 for padding
    gt: np.ndarray        # (B, M, 2)
    occluded: np.ndarray  # (B, M) bool
    seed: Tuple[int, ...]


def augment_record(rec, code):
    """Label-preserving variant of a pair, selected by ``code`` in [0, 16).

    Bit 0 mirrors x, bit 1 mirrors y, bit 2 transposes (square images
    only), bit 3 inverts intensities. The same map is applied to both
    images, the keypoints and the ground truth, so occlusion flags carry over.
    """
    img1, img2 = rec.img1, rec.img2
    kp = np.array(rec.keypoints1, dtype=np.float64)
    gt = np.array(rec.gt_positions2, dtype=np.float64)
    h, w = img1.shape
    if code & 4 and h == w:
        img1, img2 = img1.T, img2.T
        kp, gt = kp[:, ::-1].copy(), gt[:, ::-1].copy()
    if code & 1:
        img1, img2 = img1[:, ::-1], img2[:, ::-1]
        kp[:, 0], gt[:, 0] = w - kp[:, 0], w - gt[:, 0]
    if code & 2:
        img1, img2 = img1[::-1], img2[::-1]
        kp[:, 1], gt[:, 1] = h - kp[:, 1], h - gt[:, 1]
    if code & 8:
        img1, img2 = 1.0 - img1, 1.0 - img2
    # a point on the left/top border would map onto the excluded right/bottom edge
    kp = np.minimum(kp, np.array([w, h]) - 1e-6)
    return PairRecord(np.ascontiguousarray(img1), np.ascontiguousarray(img2), kp, gt,
                      rec.occluded)


def make_batch(records, stage, rng, batch_size, max_keypoints, seed, augment=False):
    idx = rng.integers(0, len(records), size=batch_size)
    codes = rng.integers(0, 16, size=batch_size) if augment else np.zeros(batch_size, int)
    h, w = records[0].img1.shape
    rows, cols = h // PATCH, w // PATCH
    chosen = []
    for i, code in zip(idx, codes):
        rec = records[int(i)]
        if code:
            rec = augment_record(rec, int(code))
        y, keep = coarse_targets(rec, (rows, cols), stage)
        if len(keep) > max_keypoints:
            sub = np.sort(rng.choice(len(keep), size=max_keypoints, replace=False))
            keep, y = keep[sub], y[sub]
        chosen.append((rec, y, keep))
    m = max(1, max(len(k) for _, _, k in chosen))
    kps = np.zeros((batch_size, m, 2))
    gt = np.zeros((batch_size, m, 2))
    targets = np.full((batch_size, m), -1, dtype=np.int64)
    occ = np.zeros((batch_size, m), dtype=bool)
    counts = np.zeros(batch_size, dtype=np.int64)
    for b, (rec, y, keep) in enumerate(chosen):
        k = len(keep)
        counts[b] = k
        kps[b, :k] = rec.keypoints1[keep]
        gt[b, :k] = rec.gt_positions2[keep]
        targets[b, :k] = y
        occ[b, :k] = rec.occluded[keep]
    img1 = np.stack([chosen[b][0].img1 for b in range(batch_size)]).astype(np.float32)
    img2 = np.stack([chosen[b][0].img2 for b in range(batch_size)]).astype(np.float32)
    return Batch(img1, img2, kps, counts, targets, gt, occ, seed)


def _step_rng(cfg, stage, step):
    seed = (cfg.seed, int(stage), step)
    return np.random.default_rng(seed), seed


class BatchProducer:
    """Builds batches on a worker thread; at most ``prefetch`` are buffered."""

    def __init__(self, records, stage, cfg, steps):
        self.q = queue.Queue(maxsize=max(cfg.prefetch, 1))
        self._stop = threading.Event()
        self._t = threading.Thread(target=self._run, args=(records, stage, cfg, steps),
                                   daemon=True)
        self._t.start()

    def _run(self, records, stage, cfg, steps):
        for step in range(steps):
            if self._stop.is_set():
                return
            rng, seed = _step_rng(cfg, stage, step)
            item = make_batch(records, stage, rng, cfg.batch_size, cfg.max_keypoints, seed,
                              cfg.augment)
            while not self._stop.is_set():
                try:
                    self.q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def get(self):
        return self.q.get()

    def close(self):
        self._stop.set()
        self._t.join(timeout=5)


def _batches(records, stage, cfg, steps):
    if cfg.prefetch > 0:
        prod = BatchProducer(records, stage, cfg, steps)
        try:
            for _ in range(steps):
                yield prod.get()
        finally:
            prod.close()
    else:
        for step in range(steps):
            rng, seed = _step_rng(cfg, stage, step)
            yield make_batch(records, stage, rng, cfg.batch_size, cfg.max_keypoints, seed,
                             cfg.augment)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _batch_metrics(scores, targets, occluded, n_patches):
    pred = scores.argmax(axis=-1)
    valid = targets >= 0
    vis = valid & ~occluded
    occ = valid & occluded
    acc = float((pred[vis] == targets[vis]).mean()) if vis.any() else float("nan")
    rec = float((pred[occ] == n_patches).mean()) if occ.any() else None
    return acc, rec


def _check_occlusion_balance(records, stage, cfg, rows, cols):
    occ = np.concatenate([r.occluded for r in records])
    frac = float(occ.mean()) if occ.size else 0.0
    m = float(np.mean([len(r.occluded) for r in records]))
    h, w = rows * PATCH, cols * PATCH
    ratio = imbalance_ratio(m, h, w, frac)
    log.info("%s: occluded fraction %.3f, mean keypoints %.1f, per-patch class prior %.4f",
             stage.name, frac, m, ratio)
    if stage == StageId.SYNTH_OCC and not cfg.occ_fraction_min <= frac <= cfg.occ_fraction_max:
        raise TrainingError(f"occluded fraction {frac:.3f} outside "
                            f"[{cfg.occ_fraction_min}, {cfg.occ_fraction_max}]")
    return frac, ratio


def run_stage(stage, cfg, model=None, resume=None, records=None, callback=None):
    """Train one curriculum stage and write ``cfg.out``.

    ``resume`` is a checkpoint path; ``model`` an in-memory tracker that
    already holds the previous stage's weights (its completed stage is read
    from ``model.completed_stage``). Returns (model, reports).
    """
    stage = StageId(stage)
    state = None
    if model is None and resume:
        model, state = Tracker.load(resume)
    if model is None:
        model = Tracker(ModelConfig(dim=cfg.dim, coarse_depth=cfg.coarse_depth,
                                    fine_depth=cfg.fine_depth, seed=cfg.seed))
    done = model.completed_stage
    if done < PREREQUISITE[stage]:
        need = StageId(PREREQUISITE[stage]).name if PREREQUISITE[stage] else "none"
        raise CurriculumError(f"stage {stage.name} needs a checkpoint from stage {need} or later; "
                              f"the given model completed stage {done}")

    steps = cfg.steps_for(stage)
    reports = []
    if steps == 0:
        if state is not None:
            save_checkpoint(cfg.out, state)
        else:
            model.save(cfg.out, stage=done)
        return model, reports

    if records is None:
        path = cfg.data_for(stage)
        if not path:
            raise ValueError(f"no dataset path configured for stage {stage.name}")
        records = load_dataset(path)
    if not records:
        raise ValueError("empty dataset")
    h, w = records[0].img1.shape
    rows, cols = h // PATCH, w // PATCH
    n_patches = rows * cols
    _check_occlusion_balance(records, stage, cfg, rows, cols)

    if stage == StageId.FINE:
        for _, p in model.coarse_parameters():
            p.requires_grad = False
            p.grad = None
        for _, p in model.fine_parameters():
            p.requires_grad = True
        params = model.fine_parameters()
    else:
        model.set_trainable(True)
        params = model.coarse_parameters()
        for _, p in model.fine_parameters():
            p.requires_grad = False
    opt = Adam(params, lr=cfg.lr)

    writer = None
    log_file = None
    if cfg.log:
        new = not Path(cfg.log).exists()
        log_file = open(cfg.log, "a", newline="")
        writer = csv.writer(log_file)
        if new:
            writer.writerow(["step", "stage", "cel", "l2", "acc", "occ_recall"])
    try:
        for step, batch in enumerate(_batches(records, stage, cfg, steps)):
            opt.zero_grad()
            if stage == StageId.FINE:
                rep = _fine_step(model, batch, cfg, stage, step, rows, cols)
                if rep is None:
                    continue
                loss, report = rep
            else:
                loss, report = _coarse_step(model, batch, cfg, stage, step, rows, cols, n_patches)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at {stage.name} step {step} "
                                    f"(batch seed {batch.seed})")
            loss.backward()
            opt.step()
            if step % cfg.log_every == 0 or step == steps - 1:
                reports.append(report)
                if writer:
                    writer.writerow([report.step, stage.cli_name, f"{report.cel:.6f}",
                                     "" if report.l2 is None else f"{report.l2:.6f}",
                                     f"{report.acc:.4f}",
                                     "" if report.occ_recall is None else f"{report.occ_recall:.4f}"])
                log.info("%s step %d loss %.4f acc %.3f", stage.cli_name, step, report.cel,
                         report.acc)
                if callback:
                    callback(report)
    finally:
        if log_file:
            log_file.close()
        model.set_trainable(True)
    model.completed_stage = max(done, int(stage))
    model.save(cfg.out, stage=model.completed_stage)
    return model, reports


def _coarse_step(model, batch, cfg, stage, step, rows, cols, n_patches):
    out = model.coarse(batch.img1, batch.img2, batch.kps, batch.counts)
    ce = T.cross_entropy(out.scores, batch.targets)
    l2 = None
    loss = ce
    if stage == StageId.SYNTH_NO_OCC:
        pred = expected_centers(out.scores, rows, cols)
        mask = batch.targets >= 0
        l2_t = masked_mse(pred, batch.gt / PATCH, mask)
        loss = T.add(ce, T.scale(l2_t, cfg.l2_weight))
        l2 = float(l2_t.data)
    acc, rec = _batch_metrics(out.scores.data, batch.targets, batch.occluded, n_patches)
    return loss, LossReport(stage, step, float(ce.data), l2, acc, rec)


def _fine_step(model, batch, cfg, stage, step, rows, cols):
    with T.no_grad():
        out = model.coarse(batch.img1, batch.img2, batch.kps, batch.counts)
    pred = out.scores.data.argmax(axis=-1)
    valid = batch.targets >= 0
    bi, pi = np.nonzero(valid)
    sel, d = fine_targets(pred[bi, pi], batch.gt[bi, pi], batch.occluded[bi, pi], rows, cols,
                          cfg.fine_target_clip)
    if len(sel) == 0:
        return None
    bi, pi = bi[sel], pi[sel]
    offs = model.refine_points(out, bi, pi, pred[bi, pi])
    loss = stage_loss(StageId.FINE, predicted=offs, gt=d)
    exact = pred[bi, pi] == patch_index(batch.gt[bi, pi], rows, cols)
    return loss, LossReport(stage, step, float(loss.data), None, float(exact.mean()), None)


def train_curriculum(cfg, stages, resume=None, records=None, callback=None):
    """Run several stages back to back, keeping the model in memory."""
    model = None
    reports = []
    out_base = cfg.out
    for i, st in enumerate(stages):
        st = StageId(st)
        c = dataclasses.replace(cfg, out=out_base if i == len(stages) - 1 else
                                f"{out_base}.{st.cli_name}")
        model, reps = run_stage(st, c, model=model, resume=resume if i == 0 else None,
                                records=None if records is None else records.get(st),
                                callback=callback)
        reports.extend(reps)
    return model, reports


def occluded_dataset_fraction(records):
    occ = np.concatenate([r.occluded for r in records])
    return float(occ.mean()) if occ.size else 0.0
