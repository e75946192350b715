import json
import math

import numpy as np
import pytest

from conftest import tiny_config
from selfrel import container, trainer
from selfrel.errors import CheckpointError, RejectedInputError, TrainingStepError
from selfrel.trainer import (TrainerState, batch_indices, build_batch, checkpoint_load, checkpoint_save,
                             lambda_schedule, lr_schedule, momentum_update, train_step)


def images(n=8, size=16, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 3, size, size)).astype(np.float32)


def run_steps(state, imgs, k):
    reports = []
    for _ in range(k):
        epoch, idx = batch_indices(state.cfg, imgs.shape[0], state.step)
        res = train_step(state, build_batch(imgs, idx, state.cfg, epoch))
        reports.append(res.report.as_dict())
    return reports


# ---- schedules ------------------------------------------------------------

def test_lambda_endpoints():
    assert lambda_schedule(0, 100) == 0.996
    assert lambda_schedule(100, 100) == 1.0
    assert lambda_schedule(50, 100) == pytest.approx(0.998, abs=1e-15)


def test_lambda_monotone():
    vals = [lambda_schedule(s, 37) for s in range(38)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0.996 <= v <= 1.0 for v in vals)


def test_schedule_range_errors():
    with pytest.raises(RejectedInputError):
        lambda_schedule(11, 10)
    with pytest.raises(RejectedInputError):
        lr_schedule(-1, 10, 1.0, 0.0, 0.05)


def test_lr_endpoints():
    total, peak, floor = 200, 1e-3, 1e-6
    warm = 10
    assert lr_schedule(0, total, peak, floor, 0.05) == 0.0
    assert lr_schedule(5, total, peak, floor, 0.05) == pytest.approx(peak / 2, abs=1e-18)
    assert lr_schedule(warm, total, peak, floor, 0.05) == peak
    assert lr_schedule(total, total, peak, floor, 0.05) == floor
    mid = lr_schedule(warm + (total - warm) // 2, total, peak, floor, 0.05)
    assert mid == pytest.approx(floor + (peak - floor) / 2, rel=1e-12)


def test_peak_lr_scaling():
    cfg = tiny_config()
    cfg.train.batch_size = 64
    assert trainer.peak_lr(cfg) == pytest.approx(5e-4 * 64 / 256)


# ---- EMA ----------------------------------------------------------------------

def test_init_teacher_equals_student():
    pair = trainer.init_pair(tiny_config())
    for k, p in pair.student.items():
        assert pair.teacher[k].data.tobytes() == p.data.tobytes()


def test_momentum_update_cases():
    pair = trainer.init_pair(tiny_config())
    before = {k: t.data.copy() for k, t in pair.teacher.items()}
    for p in pair.student.values():
        p.data += 1.0
    momentum_update(pair, 1.0)
    for k, t in pair.teacher.items():
        np.testing.assert_array_equal(t.data, before[k])
    momentum_update(pair, 0.0)
    for k, t in pair.teacher.items():
        np.testing.assert_array_equal(t.data, pair.student[k].data)


def test_momentum_scalar_arithmetic():
    pair = trainer.init_pair(tiny_config(**{"train.precision": 64}))
    k = "encoder.cls_token"
    pair.teacher[k].data[0] = 0.0
    pair.student[k].data[0] = 1.0
    momentum_update(pair, 0.996)
    assert pair.teacher[k].data[0] == pytest.approx(0.004, abs=1e-15)


def test_momentum_copies_buffers():
    pair = trainer.init_pair(tiny_config())
    for v in pair.student_buffers.values():
        v += 0.5
    momentum_update(pair, 0.99)
    for k, v in pair.student_buffers.items():
        np.testing.assert_array_equal(pair.teacher_buffers[k], v)


def test_momentum_shape_mismatch():
    pair = trainer.init_pair(tiny_config())
    pair.teacher["encoder.cls_token"].data = np.zeros(3, np.float32)
    with pytest.raises(AssertionError):
        momentum_update(pair, 0.5)


# ---- steps ----------------------------------------------------------------

def test_teacher_gradients_zero_and_only_ema_changes_teacher():
    cfg = tiny_config()
    imgs = images()
    state = TrainerState.fresh(cfg, 8)
    before = {k: t.data.copy() for k, t in state.pair.teacher.items()}
    student_before = {k: p.data.copy() for k, p in state.pair.student.items()}
    res = run_steps(state, imgs, 1)
    assert math.isfinite(res[0]["L"])
    for t in state.pair.teacher.values():
        assert t.grad is None or not t.grad.any()
    lam = lambda_schedule(0, state.total_steps)
    for k, t in state.pair.teacher.items():
        expected = before[k] * np.float32(lam) + np.float32(1 - lam) * state.pair.student[k].data
        np.testing.assert_allclose(t.data, expected, rtol=0, atol=1e-7)
    assert any(not np.array_equal(student_before[k], p.data) for k, p in state.pair.student.items())


def test_teacher_follows_student_when_lambda_zero():
    cfg = tiny_config(**{"optim.momentum_start": 0.0, "optim.momentum_end": 0.0,
                         "losses.enable_pixel": False, "losses.enable_channel": False})
    state = TrainerState.fresh(cfg, 8)
    run_steps(state, images(), 1)
    for k, p in state.pair.student.items():
        np.testing.assert_array_equal(state.pair.teacher[k].data, p.data)


def test_optimizer_never_sees_teacher():
    state = TrainerState.fresh(tiny_config(), 8)
    ids = {id(p) for p in state.optimizer.params.values()}
    assert not ids & {id(t) for t in state.pair.teacher.values()}


def test_determinism_ten_steps():
    cfg = tiny_config(**{"train.epochs": 5})
    imgs = images()
    a = run_steps(TrainerState.fresh(cfg, 8), imgs, 10)
    b = run_steps(TrainerState.fresh(cfg, 8), imgs, 10)
    assert a == b


def test_non_finite_loss_halts():
    cfg = tiny_config()
    state = TrainerState.fresh(cfg, 8)
    state.pair.student["heads.image.prototypes.weight"].data[:] = np.nan
    with pytest.raises(TrainingStepError):
        run_steps(state, images(), 1)


def test_loss_toggles_in_report():
    cfg = tiny_config(**{"losses.enable_pixel": False})
    rep = run_steps(TrainerState.fresh(cfg, 8), images(), 1)[0]
    assert rep["L_p"] == 0.0 and rep["L"] == pytest.approx(rep["L_I"] + rep["L_c"], rel=1e-6)


def test_symmetric_variant_skips_predictor():
    cfg = tiny_config(**{"heads.asymmetric": False})
    state = TrainerState.fresh(cfg, 8)
    run_steps(state, images(), 1)
    assert not state.pair.student["heads.pixel.pred.weight"].grad.any()


# ---- checkpoints ----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    state = TrainerState.fresh(cfg, 8)
    run_steps(state, images(), 2)
    checkpoint_save(tmp_path / "a.srlt", state)
    loaded = checkpoint_load(tmp_path / "a.srlt")
    a, b = trainer.state_arrays(state), trainer.state_arrays(loaded)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes(), k


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config(**{"train.epochs": 4})
    imgs = images()
    ref = TrainerState.fresh(cfg, 8)
    run_steps(ref, imgs, 3)
    checkpoint_save(tmp_path / "s.srlt", ref)
    tail_ref = run_steps(ref, imgs, 5)
    resumed = checkpoint_load(tmp_path / "s.srlt", cfg, 8)
    assert run_steps(resumed, imgs, 5) == tail_ref
    for k, p in ref.pair.student.items():
        assert p.data.tobytes() == resumed.pair.student[k].data.tobytes()


def test_checkpoint_shape_mismatch_names_array(tmp_path):
    state = TrainerState.fresh(tiny_config(), 8)
    checkpoint_save(tmp_path / "a.srlt", state)
    other = tiny_config(**{"model.embed_dim": 18, "relation.heads": 3})
    with pytest.raises(CheckpointError, match="student/encoder"):
        checkpoint_load(tmp_path / "a.srlt", other)


def test_checkpoint_truncated(tmp_path):
    state = TrainerState.fresh(tiny_config(), 8)
    checkpoint_save(tmp_path / "a.srlt", state)
    raw = (tmp_path / "a.srlt").read_bytes()
    (tmp_path / "b.srlt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "b.srlt")


def test_checkpoint_header(tmp_path):
    state = TrainerState.fresh(tiny_config(), 8)
    checkpoint_save(tmp_path / "a.srlt", state)
    raw = (tmp_path / "a.srlt").read_bytes()
    assert raw[:4] == b"SRLT"
    _, digest = container.load(tmp_path / "a.srlt")
    assert digest.hex() == state.cfg.digest()


# ---- loop -----------------------------------------------------------------

def test_train_writes_outputs(tmp_path, capsys):
    cfg = tiny_config()
    imgs = images()
    state = trainer.train(cfg, imgs, tmp_path)
    assert state.step == state.total_steps == 4
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "lr", "lambda", "L_I", "L_p", "L_c", "L"}
    assert rec["lambda"] == 0.996
    assert json.loads(lines[-1])["lambda"] < 1.0
    for name in ("ckpt_e0001.srlt", "ckpt_e0002.srlt", "final.srlt", "config.cfg"):
        assert (tmp_path / name).is_file()
    out = capsys.readouterr().out
    assert "epoch 1/2" in out and "epoch 2/2" in out


def test_train_resume_continues_log(tmp_path):
    cfg = tiny_config()
    imgs = images()
    trainer.train(cfg, imgs, tmp_path / "full", echo=None)
    s = trainer.train(cfg, imgs, tmp_path / "part", max_steps=2, echo=None)
    checkpoint_save(tmp_path / "mid.srlt", s)
    s2 = checkpoint_load(tmp_path / "mid.srlt", cfg, 8)
    trainer.train(cfg, imgs, tmp_path / "part", state=s2, echo=None)
    assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == (tmp_path / "part" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "full" / "final.srlt").read_bytes() == (tmp_path / "part" / "final.srlt").read_bytes()


def test_batch_geometry_layout():
    cfg = tiny_config()
    imgs = images()
    epoch, idx = batch_indices(cfg, 8, 1)
    b = build_batch(imgs, idx, cfg, epoch)
    assert b.globals.shape == (2, 4, 3, 16, 16)
    assert b.locals.shape == (2, 4, 3, 8, 8)
    assert len(b.geometries) == 4 and all(len(g) == 4 for g in b.geometries)
    assert all(g.kind == "local" for g in b.geometries[2])
