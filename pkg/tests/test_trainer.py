import math

import numpy as np
import pytest

from kptrack.datagen import PairRecord, SynthConfig, gen_synthetic_pair
from kptrack.model import Tracker
from kptrack.nn import load_checkpoint
from kptrack.tensor import Tensor
from kptrack.trainer import (CurriculumError, StageId, TrainConfig, TrainingError, _batches,
                             augment_record, coarse_targets, expected_centers, fine_targets,
                             load_config, make_batch, parse_config, run_stage, stage_loss)

TINY = dict(dim=8, coarse_depth=1, fine_depth=1, batch_size=2, max_keypoints=8, log_every=1)


@pytest.fixture(scope="module")
def records():
    cfg = SynthConfig(height=32, width=32, bg_max=6, cube_max=12)
    out = []
    for s in range(6):
        p = gen_synthetic_pair(cfg, s)
        out.append(PairRecord(p.img1, p.img2, p.keypoints1, p.gt_positions2, p.occluded))
    return out


def tiny_cfg(tmp_path, **kw):
    args = dict(TINY, steps_synth1=3, steps_synth2=3, steps_fine=3, out=str(tmp_path / "ck.trkf"))
    args.update(kw)
    return TrainConfig(**args)


def record(kps, gt, occ, size=64):
    z = np.zeros((size, size))
    return PairRecord(z, z, np.asarray(kps, float), np.asarray(gt, float), np.asarray(occ, bool))


def test_targets_example():
    rec = record([[10, 10], [20, 20]], [[37.2, 12.9], [0, 0]], [False, True])
    y, keep = coarse_targets(rec, (8, 8), StageId.SYNTH_OCC)
    assert list(y) == [12, 64] and list(keep) == [0, 1]
    y, keep = coarse_targets(rec, (8, 8), StageId.SYNTH_NO_OCC)
    assert list(y) == [12] and list(keep) == [0]


def test_targets_grid_mismatch():
    with pytest.raises(ValueError):
        coarse_targets(record([[1, 1]], [[1, 1]], [False]), (4, 4), StageId.SYNTH_OCC)


def test_uniform_scores_give_log65():
    loss = stage_loss(StageId.SYNTH_OCC, scores=Tensor(np.zeros((1, 1, 65))), targets=[[7]])
    assert float(loss.data) == pytest.approx(math.log(65), rel=1e-6)


def test_fine_loss_zero_at_target(rng):
    d = rng.uniform(-3, 3, (5, 2))
    assert float(stage_loss(StageId.FINE, predicted=Tensor(d), gt=d).data) == pytest.approx(0)
    with pytest.raises(ValueError):
        stage_loss(StageId.FINE, scores=Tensor(np.zeros((1, 1, 5))), predicted=Tensor(d), gt=d)


def test_stage1_loss_adds_weighted_l2():
    scores = np.zeros((1, 2, 5))
    scores[0, 0, 3] = 50.0  # all mass on patch 3 of a 2x2 grid -> center (1.5, 1.5)
    s = Tensor(scores)
    pred = expected_centers(s, 2, 2)
    np.testing.assert_allclose(pred.data[0, 0], [1.5, 1.5], atol=1e-5)
    gt = np.array([[[0.5, 1.5], [0, 0]]])
    mask = np.array([[True, False]])
    ce = float(stage_loss(StageId.SYNTH_OCC, scores=s, targets=[[3, -1]]).data)
    tot = float(stage_loss(StageId.SYNTH_NO_OCC, s, [[3, -1]], pred, gt, mask, 0.1).data)
    assert tot == pytest.approx(ce + 0.1 * 1.0, rel=1e-4)


def test_cross_entropy_only_stages_reject_l2():
    with pytest.raises(ValueError):
        stage_loss(StageId.REAL, scores=Tensor(np.zeros((1, 1, 5))), targets=[[0]],
                   predicted=Tensor(np.zeros((1, 1, 2))))


def test_fine_targets_selection():
    # gt in patch (1, 1) of a 4x4 grid; predictions: exact, adjacent, far, OCL
    gt = np.tile([[13.0, 10.0]], (4, 1))
    sel, d = fine_targets(np.array([5, 6, 15, 16]), gt, np.zeros(4, bool), 4, 4)
    assert list(sel) == [0, 1]
    np.testing.assert_allclose(d[0], [1.0, -2.0])
    np.testing.assert_allclose(d[1], [-3.9, -2.0])  # -7 clipped to the head's range


def test_augment_identity_motion_stays_identity(rng):
    kps = rng.uniform(0, 64, (20, 2))
    img = rng.uniform(size=(64, 64))
    rec = PairRecord(img, img, kps, kps.copy(), np.zeros(20, bool))
    for code in range(16):
        a = augment_record(rec, code)
        np.testing.assert_allclose(a.gt_positions2, a.keypoints1, atol=1e-5)
        np.testing.assert_array_equal(a.img1, a.img2)


def test_augment_moves_content_with_points():
    img = np.zeros((64, 64))
    img[10, 50] = 1.0
    rec = PairRecord(img, img, np.array([[50.5, 10.5]]), np.array([[50.5, 10.5]]),
                     np.zeros(1, bool))
    for code in range(8):
        a = augment_record(rec, code)
        x, y = a.keypoints1[0]
        assert a.img1[int(y), int(x)] == 1.0
    assert augment_record(rec, 8).img1[10, 50] == 0.0


def test_augment_keeps_labels_consistent(records):
    for rec in records:
        for code in range(16):
            a = augment_record(rec, code)
            np.testing.assert_array_equal(a.occluded, rec.occluded)
            assert np.all(a.keypoints1 < 32) and np.all(a.keypoints1 >= 0)
            # integer motions survive the dihedral maps up to sign and axis swap
            m0 = np.sort(np.abs(rec.gt_positions2 - rec.keypoints1), axis=1)
            m1 = np.sort(np.abs(a.gt_positions2 - a.keypoints1), axis=1)
            vis = ~rec.occluded & np.all(rec.keypoints1 > 0, axis=1)
            np.testing.assert_allclose(m0[vis], m1[vis], atol=1e-9)


def test_batch_padding(records):
    b = make_batch(records, StageId.SYNTH_OCC, np.random.default_rng(0), 3, 5, (0,))
    assert b.kps.shape[0] == 3 and b.kps.shape[1] <= 5
    for i, c in enumerate(b.counts):
        assert np.all(b.targets[i, c:] == -1) and np.all(b.targets[i, :c] >= 0)
    assert b.img1.dtype == np.float32


def test_prefetch_matches_inline(tmp_path, records):
    a = list(_batches(records, StageId.SYNTH_OCC, tiny_cfg(tmp_path), 4))
    b = list(_batches(records, StageId.SYNTH_OCC, tiny_cfg(tmp_path, prefetch=2), 4))
    for x, y in zip(a, b):
        assert x.img1.tobytes() == y.img1.tobytes() and x.kps.tobytes() == y.kps.tobytes()
        np.testing.assert_array_equal(x.targets, y.targets)


def test_pair_without_visible_points_trains(tmp_path, records):
    empty = PairRecord(records[0].img1, records[0].img2, records[0].keypoints1[:1],
                       records[0].gt_positions2[:1], np.ones(1, bool))
    _, reps = run_stage(StageId.SYNTH_NO_OCC, tiny_cfg(tmp_path), records=[empty, records[1]])
    assert all(np.isfinite(r.cel) for r in reps)


def test_gate_requires_stage1(tmp_path, records):
    with pytest.raises(CurriculumError, match="SYNTH_NO_OCC"):
        run_stage(StageId.SYNTH_OCC, tiny_cfg(tmp_path), records=records)
    with pytest.raises(CurriculumError):
        run_stage(StageId.FINE, tiny_cfg(tmp_path), records=records)


def test_fine_freezes_coarse_bytes(tmp_path, records):
    cfg = tiny_cfg(tmp_path)
    m, _ = run_stage(StageId.SYNTH_NO_OCC, cfg, records=records)
    m, _ = run_stage(StageId.SYNTH_OCC, cfg, model=m, records=records)
    before = {k: p.data.tobytes() for k, p in m.coarse_parameters()}
    fine_before = {k: p.data.copy() for k, p in m.fine_parameters()}
    # the zero-initialized head must start moving
    m, reps = run_stage(StageId.FINE, tiny_cfg(tmp_path, steps_fine=10), model=m,
                        records=records)
    assert reps
    assert {k: p.data.tobytes() for k, p in m.coarse_parameters()} == before
    assert any(not np.array_equal(fine_before[k], p.data) for k, p in m.fine_parameters())
    loaded, _ = Tracker.load(cfg.out)
    assert {k: p.data.tobytes() for k, p in loaded.coarse_parameters()} == before
    assert loaded.completed_stage == 4


def test_zero_steps_round_trips_checkpoint(tmp_path, records):
    cfg = tiny_cfg(tmp_path)
    run_stage(StageId.SYNTH_NO_OCC, cfg, records=records)
    src = (tmp_path / "ck.trkf").read_bytes()
    out = tmp_path / "same.trkf"
    run_stage(StageId.SYNTH_OCC, tiny_cfg(tmp_path, steps_synth2=0, out=str(out)),
              resume=str(tmp_path / "ck.trkf"), records=records)
    assert out.read_bytes() == src


def test_training_is_deterministic(tmp_path, records):
    blobs = []
    for name in ("a", "b"):
        cfg = tiny_cfg(tmp_path, out=str(tmp_path / f"{name}.trkf"),
                       log=str(tmp_path / f"{name}.csv"))
        run_stage(StageId.SYNTH_NO_OCC, cfg, records=records)
        blobs.append(((tmp_path / f"{name}.trkf").read_bytes(),
                      (tmp_path / f"{name}.csv").read_bytes()))
    assert blobs[0] == blobs[1]
    header = blobs[0][1].decode().splitlines()[0]
    assert header == "step,stage,cel,l2,acc,occ_recall"


def test_nan_loss_aborts_with_batch_seed(tmp_path, records):
    cfg = tiny_cfg(tmp_path)
    m, _ = run_stage(StageId.SYNTH_NO_OCC, cfg, records=records)
    for _, p in m.coarse_parameters():
        p.data[...] = np.nan
    with pytest.raises(TrainingError, match="seed"):
        run_stage(StageId.SYNTH_OCC, cfg, model=m, records=records)


def test_ocl_receives_gradient_in_stage2(tmp_path, records):
    cfg = tiny_cfg(tmp_path)
    m, _ = run_stage(StageId.SYNTH_NO_OCC, cfg, records=records)
    before = dict(m.coarse_parameters())["aam.ocl"].data.copy()
    m, _ = run_stage(StageId.SYNTH_OCC, cfg, model=m, records=records)
    after = dict(m.coarse_parameters())["aam.ocl"].data
    assert not np.array_equal(before, after)


def test_occlusion_balance_guard(tmp_path, records):
    cfg = tiny_cfg(tmp_path)
    m, _ = run_stage(StageId.SYNTH_NO_OCC, cfg, records=records)
    clean = [PairRecord(r.img1, r.img2, r.keypoints1[~r.occluded], r.gt_positions2[~r.occluded],
                        r.occluded[~r.occluded]) for r in records]
    with pytest.raises(TrainingError, match="occluded fraction"):
        run_stage(StageId.SYNTH_OCC, cfg, model=m, records=clean)


def test_checkpoint_carries_meta(tmp_path, records):
    cfg = tiny_cfg(tmp_path)
    run_stage(StageId.SYNTH_NO_OCC, cfg, records=records)
    tensors = load_checkpoint(cfg.out)
    assert float(tensors["meta.stage"][0]) == 1 and float(tensors["meta.dim"][0]) == 8


def test_stage_names():
    assert StageId.parse("SYNTH2") == StageId.SYNTH_OCC
    assert StageId.FINE.cli_name == "fine"
    with pytest.raises(ValueError):
        StageId.parse("stage9")


def test_parse_config():
    cfg = parse_config("# comment\nbatch_size = 4\nlr=5e-4  # inline\naugment = false\n")
    assert cfg.batch_size == 4 and cfg.lr == 5e-4 and cfg.augment is False


@pytest.mark.parametrize("text", ["bogus = 1", "lr = fast", "batch_size = 0", "lr=1\nlr=2",
                                  "no equals sign"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_load_config_resolves_paths(tmp_path):
    (tmp_path / "t.cfg").write_text("data_synth = data/s\nout = ck.trkf\n")
    cfg = load_config(tmp_path / "t.cfg")
    assert cfg.data_synth == str(tmp_path / "data" / "s")
    assert cfg.out == str(tmp_path / "ck.trkf")


def test_coarse_train_step_changes_loss(tmp_path, records):
    cfg = tiny_cfg(tmp_path, steps_synth1=20)
    _, reps = run_stage(StageId.SYNTH_NO_OCC, cfg, records=records[:1])
    assert reps[-1].cel < reps[0].cel
