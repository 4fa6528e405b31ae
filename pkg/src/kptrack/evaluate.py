"""Held-out evaluation: accuracy at 6 px, correct-match counts, occlusion P/R."""

import csv
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .coarse import DEFAULT_THRESHOLD, Verdict
from .datagen import load_dataset, read_manifest
from .features import PATCH, patch_index
from .model import Tracker

CORRECT_RADIUS = 6.0
MAX_KEYPOINTS = 512


@dataclass
class EvalConfig:
    threshold: float = DEFAULT_THRESHOLD
    max_keypoints: int = MAX_KEYPOINTS
    radius: float = CORRECT_RADIUS
    coarse_only: bool = False


@dataclass
class EvalMetrics:
    tag: str
    pairs: int
    accuracy: float          # correct / emitted PATCH matches, averaged over pairs
    correct_mean: float      # correct matches per pair
    sampled_mean: float      # keypoints evaluated per pair
    occ_precision: float
    occ_recall: float
    patch_accuracy: float    # argmax patch == gt patch over visible keypoints
    mean_error: float        # px, over emitted matches whose gt is visible
    median_error: float

    def row(self):
        return asdict(self)


@dataclass
class PairScore:
    sampled: int
    emitted: int
    correct: int
    pred_occ: int
    true_occ: int
    hit_occ: int
    visible: int
    patch_hits: int
    errors: np.ndarray


def score_pair(results, gt, occluded, rows, cols, radius=CORRECT_RADIUS):
    """Score one pair's TrackResults against ground truth.

    A match is correct iff the verdict is PATCH, the gt is visible and the
    predicted position lies strictly closer than ``radius`` pixels.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    occluded = np.asarray(occluded, dtype=bool)
    if len(results) != len(gt):
        raise ValueError(f"{len(results)} results for {len(gt)} keypoints")
    gt_patch = patch_index(gt, rows, cols)
    emitted = correct = pred_occ = hit_occ = patch_hits = 0
    errors = []
    for r, g, occ, gp in zip(results, gt, occluded, gt_patch):
        if r.verdict == Verdict.OCCLUDED:
            pred_occ += 1
            hit_occ += bool(occ)
        if not occ and r.patch is not None and r.patch == gp:
            patch_hits += 1
        if r.verdict != Verdict.PATCH:
            continue
        emitted += 1
        if occ:
            continue
        err = float(np.hypot(r.position[0] - g[0], r.position[1] - g[1]))
        errors.append(err)
        if err < radius:
            correct += 1
    return PairScore(len(gt), emitted, correct, pred_occ, int(occluded.sum()), hit_occ,
                     int((~occluded).sum()), patch_hits, np.asarray(errors))


def _ratio(num, den, empty=0.0):
    return num / den if den else empty


def aggregate(scores, tag=""):
    if not scores:
        raise ValueError("no pairs to aggregate")
    errs = np.concatenate([s.errors for s in scores]) if scores else np.zeros(0)
    pred_occ = sum(s.pred_occ for s in scores)
    true_occ = sum(s.true_occ for s in scores)
    hit_occ = sum(s.hit_occ for s in scores)
    return EvalMetrics(
        tag=tag,
        pairs=len(scores),
        accuracy=float(np.mean([_ratio(s.correct, s.emitted) for s in scores])),
        correct_mean=float(np.mean([s.correct for s in scores])),
        sampled_mean=float(np.mean([s.sampled for s in scores])),
        occ_precision=_ratio(hit_occ, pred_occ),
        occ_recall=_ratio(hit_occ, true_occ, empty=1.0),
        patch_accuracy=_ratio(sum(s.patch_hits for s in scores), sum(s.visible for s in scores)),
        mean_error=float(errs.mean()) if errs.size else float("nan"),
        median_error=float(np.median(errs)) if errs.size else float("nan"),
    )


def evaluate_records(records, predict, cfg=None, tag=""):
    """``predict(record, keypoints) -> list[TrackResult]``; keypoints are the
    first ``cfg.max_keypoints`` of each record (stored in ranked order)."""
    cfg = cfg or EvalConfig()
    scores = []
    for rec in records:
        k = min(cfg.max_keypoints, len(rec.keypoints1))
        kps = rec.keypoints1[:k]
        results = predict(rec, kps)
        h, w = rec.img1.shape
        scores.append(score_pair(results, rec.gt_positions2[:k], rec.occluded[:k],
                                 h // PATCH, w // PATCH, cfg.radius))
    return aggregate(scores, tag)


def model_predictor(model, cfg):
    use_fine = not cfg.coarse_only and model.completed_stage >= 4

    def predict(rec, kps):
        if len(kps) == 0:
            return []
        return model.track(rec.img1, rec.img2, kps, cfg.threshold, use_fine=use_fine)

    return predict


def _load(model_ckpt):
    if isinstance(model_ckpt, Tracker):
        return model_ckpt
    model, _ = Tracker.load(model_ckpt)
    return model


def _tag(dataset_dir):
    try:
        return read_manifest(dataset_dir).get("kind", Path(dataset_dir).name)
    except (OSError, ValueError):
        return Path(dataset_dir).name


def evaluate(model_ckpt, dataset_dir, cfg=None, records=None):
    """Evaluate a checkpoint path (or in-memory Tracker) on a dataset folder."""
    cfg = cfg or EvalConfig()
    model = _load(model_ckpt)
    if records is None:
        records = load_dataset(dataset_dir)
    tag = _tag(dataset_dir) + ("/coarse" if cfg.coarse_only else "")
    return evaluate_records(records, model_predictor(model, cfg), cfg, tag)


def compare_coarse_vs_fine(model_ckpt, dataset_dir, cfg=None, records=None):
    """Evaluate with patch centers and with fine offsets; returns (coarse, fine)."""
    cfg = cfg or EvalConfig()
    model = _load(model_ckpt)
    if records is None:
        records = load_dataset(dataset_dir)
    tag = _tag(dataset_dir)
    coarse_cfg = EvalConfig(cfg.threshold, cfg.max_keypoints, cfg.radius, coarse_only=True)
    coarse = evaluate_records(records, model_predictor(model, coarse_cfg), coarse_cfg,
                              tag + "/coarse")

    def fine_predict(rec, kps):
        if len(kps) == 0:
            return []
        return model.track(rec.img1, rec.img2, kps, cfg.threshold, use_fine=True)

    fine = evaluate_records(records, fine_predict, cfg, tag + "/fine")
    return coarse, fine


_COLUMNS = [f.name for f in fields(EvalMetrics)]


def format_table(metrics):
    head = ("tag", "pairs", "acc@6px", "correct", "sampled", "occ P", "occ R", "patch acc",
            "mean err", "median err")
    rows = [head]
    for m in metrics:
        rows.append((m.tag, str(m.pairs), f"{m.accuracy:.4f}", f"{m.correct_mean:.2f}",
                     f"{m.sampled_mean:.1f}", f"{m.occ_precision:.4f}", f"{m.occ_recall:.4f}",
                     f"{m.patch_accuracy:.4f}", f"{m.mean_error:.3f}", f"{m.median_error:.3f}"))
    if len(metrics) == 2:
        a, b = metrics
        rows.append(("delta", "", f"{b.accuracy - a.accuracy:+.4f}",
                     f"{b.correct_mean - a.correct_mean:+.2f}", "", "", "", "",
                     f"{b.mean_error - a.mean_error:+.3f}",
                     f"{b.median_error - a.median_error:+.3f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def metrics_csv(metrics, path=None):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(_COLUMNS)
    for m in metrics:
        wr.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(m, c) for c in _COLUMNS)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def write_matches_csv(path, keypoints, results):
    """One row per keypoint: kp_index, x1, y1, verdict, x2, y2, confidence."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["kp_index", "x1", "y1", "verdict", "x2", "y2", "confidence"])
        for (x1, y1), r in zip(np.asarray(keypoints).reshape(-1, 2), results):
            x2, y2 = r.position if r.position is not None else ("", "")
            wr.writerow([r.index, repr(float(x1)), repr(float(y1)), r.verdict.name,
                         x2 if x2 == "" else repr(float(x2)),
                         y2 if y2 == "" else repr(float(y2)), repr(float(r.confidence))])


def read_matches_csv(path):
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(row)
    return out


def optional_float(s) -> Optional[float]:
    return None if s in ("", None) else float(s)
