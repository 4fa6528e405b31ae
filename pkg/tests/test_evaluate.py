import numpy as np
import pytest

from kptrack.coarse import Verdict
from kptrack.datagen import PairRecord, SynthConfig, gen_synthetic_pair, generate_dataset
from kptrack.evaluate import (EvalConfig, aggregate, compare_coarse_vs_fine, evaluate,
                              evaluate_records, format_table, metrics_csv, optional_float,
                              read_matches_csv, score_pair, write_matches_csv)
from kptrack.features import patch_index
from kptrack.model import ModelConfig, Tracker, TrackResult


def rec_from(pair):
    return PairRecord(pair.img1, pair.img2, pair.keypoints1, pair.gt_positions2, pair.occluded)


@pytest.fixture(scope="module")
def records():
    return [rec_from(gen_synthetic_pair(SynthConfig(), s)) for s in range(5)]


def oracle(rec, kps):
    out = []
    h, w = rec.img1.shape
    for i in range(len(kps)):
        if rec.occluded[i]:
            out.append(TrackResult(i, Verdict.OCCLUDED, 1.0))
        else:
            g = tuple(rec.gt_positions2[i])
            p = int(patch_index([g], h // 8, w // 8)[0])
            out.append(TrackResult(i, Verdict.PATCH, 1.0, g, g, p))
    return out


def shifted(dx):
    def predict(rec, kps):
        return [TrackResult(i, Verdict.PATCH, 1.0, (g[0] + dx, g[1]), None, None)
                for i, g in enumerate(rec.gt_positions2[:len(kps)])]
    return predict


def test_oracle_scores_perfectly(records):
    m = evaluate_records(records, oracle)
    assert m.accuracy == 1.0 and m.patch_accuracy == 1.0
    assert m.occ_precision == 1.0 and m.occ_recall == 1.0
    assert m.mean_error == 0.0


def test_all_occluded_predictor():
    rec = rec_from(gen_synthetic_pair(SynthConfig(), 0))
    rec = PairRecord(rec.img1, rec.img2, rec.keypoints1, rec.gt_positions2,
                     np.ones(len(rec.occluded), bool))
    m = evaluate_records([rec], lambda r, k: [TrackResult(i, Verdict.OCCLUDED, 0.9)
                                               for i in range(len(k))])
    assert m.correct_mean == 0 and m.occ_recall == 1.0 and m.accuracy == 0.0


def test_radius_is_strict():
    gt = np.array([[20.0, 20.0], [20.0, 20.0]])
    res = [TrackResult(0, Verdict.PATCH, 1.0, (25.999, 20.0)),
           TrackResult(1, Verdict.PATCH, 1.0, (26.0, 20.0))]
    s = score_pair(res, gt, [False, False], 8, 8)
    assert s.correct == 1 and s.emitted == 2


def test_boundary_through_records():
    # half-pixel coordinates keep gt + dx exact in floating point
    kps = np.array([[4.5, 4.5], [20.5, 30.5], [40.5, 12.5]])
    img = np.zeros((64, 64))
    rec = PairRecord(img, img, kps, kps, np.zeros(3, bool))
    assert evaluate_records([rec], shifted(5.999)).accuracy == 1.0
    assert evaluate_records([rec], shifted(6.0)).correct_mean == 0


def test_keypoint_cap():
    n = 600
    kps = np.column_stack([np.arange(n) % 64 + 0.5, (np.arange(n) // 64) % 64 + 0.5])
    img = np.zeros((64, 64))
    rec = PairRecord(img, img, kps, kps, np.zeros(n, bool))
    seen = []
    evaluate_records([rec], lambda r, k: seen.append(len(k)) or oracle(r, k))
    assert seen == [512]
    evaluate_records([rec], lambda r, k: seen.append(len(k)) or oracle(r, k),
                     EvalConfig(max_keypoints=100))
    assert seen[-1] == 100


def test_rejected_points_are_not_emitted():
    res = [TrackResult(0, Verdict.REJECTED, 0.1, None, None, 24)]
    s = score_pair(res, [[4.0, 28.0]], [False], 8, 8)
    assert s.emitted == 0 and s.patch_hits == 1


def test_length_mismatch():
    with pytest.raises(ValueError):
        score_pair([], [[1.0, 1.0]], [False], 8, 8)
    with pytest.raises(ValueError):
        aggregate([])


def test_table_has_delta_row(records):
    a = evaluate_records(records, shifted(3.0), tag="x")
    b = evaluate_records(records, oracle, tag="y")
    table = format_table([a, b])
    assert table.splitlines()[-1].startswith("delta")
    assert "+" in table.splitlines()[-1]
    assert metrics_csv([a]).splitlines()[0].startswith("tag,pairs,accuracy")


def test_matches_csv_round_trip(tmp_path):
    res = [TrackResult(0, Verdict.PATCH, 0.75, (3.5, 4.25)), TrackResult(1, Verdict.OCCLUDED, 0.5)]
    write_matches_csv(tmp_path / "m.csv", [[1.0, 2.0], [5.0, 6.0]], res)
    rows = read_matches_csv(tmp_path / "m.csv")
    assert rows[0]["verdict"] == "PATCH" and optional_float(rows[0]["x2"]) == 3.5
    assert rows[1]["x2"] == "" and optional_float(rows[1]["y2"]) is None


def test_evaluate_checkpoint_is_bit_identical(tmp_path):
    generate_dataset("synth", SynthConfig(), tmp_path / "d", 2, seed=3)
    model = Tracker(ModelConfig(dim=8, coarse_depth=1, fine_depth=1, seed=1))
    model.save(tmp_path / "m.trkf", stage=2)
    a = metrics_csv([evaluate(tmp_path / "m.trkf", tmp_path / "d")])
    b = metrics_csv([evaluate(tmp_path / "m.trkf", tmp_path / "d")])
    assert a == b
    c, f = compare_coarse_vs_fine(tmp_path / "m.trkf", tmp_path / "d", EvalConfig(threshold=0.0))
    assert c.pairs == 2 and np.isfinite(c.mean_error)
    # an untrained fine head predicts zero offsets, so both runs coincide
    assert c.mean_error == f.mean_error
