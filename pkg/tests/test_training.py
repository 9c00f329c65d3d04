import math

import numpy as np
import pytest

from atomflow.codec import class_weights
from atomflow.model import MotionModel, ModelConfig, load_model
from atomflow.synth import MotionProgram, SceneConfig, build_dataset, default_programs, static_program
from atomflow.training import (
    ClipCache,
    MetricLog,
    PlateauScheduler,
    TrainConfig,
    TrainingError,
    eval_flow,
    evaluate_flow,
    model_predictor,
    oracle_predictor,
    sample_batch,
    train_unsupervised,
    valid_starts,
    zero_flow_predictor,
    zero_flow_rmse,
)

SMALL = SceneConfig(height=32, width=32, n_frames=6, horizon=3, size_range=(4.0, 5.0), max_distractors=0)


def small_programs():
    # trajectories short enough for 32x32 frames
    return [
        MotionProgram(0, "raise", "linear", {"vy": (-2.0, -1.0)}),
        MotionProgram(1, "pull", "linear", {"vz": (0.02, 0.04)}),
    ]


def small_model(seed=0):
    return MotionModel(ModelConfig(height=32, width=32, enc_filters=(8, 8), rep_channels=8, lstm_channels=8, dec_channels=8), seed=seed)


@pytest.fixture(scope="module")
def small_ds():
    return build_dataset(small_programs(), 4, 0, SMALL)


@pytest.fixture(scope="module")
def motion_ds():
    return build_dataset(default_programs(), 10, 0)


class TestSampling:
    def test_valid_starts(self):
        assert valid_starts(12, 8) == 3
        assert valid_starts(10, 8) == 1
        assert valid_starts(9, 8) == 0

    def test_minimal_clip_forces_start_zero(self):
        ds = build_dataset([static_program()], 3, 0, SceneConfig(n_frames=10, horizon=8))
        cache = ClipCache(ds, "depth")
        _, _, _, picks = sample_batch(cache, [0], 6, 8, np.random.default_rng(0))
        assert [t for _, t in picks] == [0] * 6

    def test_batch_of_16_from_40_clips(self, motion_ds):
        cache = ClipCache(motion_ds, "depth")
        ids = motion_ds.indices("train")[:40]
        x1, x2, z, picks = sample_batch(cache, ids, 16, 8, np.random.default_rng(1))
        assert len(picks) == 16 and x1.shape == x2.shape == (16, 64, 64, 1)
        assert z.shape == (8, 16, 16, 16, 125)
        assert all(c in ids and 0 <= t < 3 for c, t in picks)

    def test_pair_and_targets_align(self, motion_ds):
        cache = ClipCache(motion_ds, "depth")
        x1, x2, z, picks = sample_batch(cache, [0], 2, 8, np.random.default_rng(2))
        c, t = picks[0]
        assert np.array_equal(x1[0], motion_ds.clips[c].frames[t, ..., 3:])
        assert np.array_equal(x2[0], motion_ds.clips[c].frames[t + 1, ..., 3:])
        assert np.array_equal(z[0, 0], cache.targets(c)[t + 1])

    def test_static_targets_one_hot_at_zero(self):
        ds = build_dataset([static_program()], 3, 0)
        z = ClipCache(ds, "depth").targets(0)
        assert np.all(z[..., 62] >= 0.999)

    def test_too_short_for_horizon(self, small_ds):
        with pytest.raises(TrainingError, match="horizon"):
            sample_batch(ClipCache(small_ds, "depth"), [0], 2, 8, np.random.default_rng(0))


class TestSchedule:
    def test_constant_metric_drops_after_patience(self):
        s = PlateauScheduler(1e-4, 0.1, 3)
        lrs = [s.step(0.5) for _ in range(7)]
        # first eval sets the best; three stale evals then trigger the drop
        assert lrs[:3] == [1e-4] * 3
        assert math.isclose(lrs[3], 1e-5, rel_tol=1e-15)
        assert lrs[4:6] == [lrs[3]] * 2 and math.isclose(lrs[6], 1e-6, rel_tol=1e-15)

    def test_improvement_resets(self):
        s = PlateauScheduler(1.0, 0.1, 2)
        for m in (0.1, 0.1, 0.2, 0.2):
            s.step(m)
        assert s.lr == 1.0

    def test_log_rejects_non_increasing(self):
        log = MetricLog(2)
        log.add(5, "val", 1.0, 0.5, [0.1, 0.2], 1e-4)
        with pytest.raises(ValueError, match="increase"):
            log.add(5, "val", 1.0, 0.5, [0.1, 0.2], 1e-4)

    def test_csv_header(self):
        log = MetricLog(3)
        assert log.to_csv().splitlines()[0] == "step,split,loss,f1,rmse_t1,rmse_t2,rmse_t3,lr"


class TestBaselines:
    def test_oracle_within_quantization_bound(self, motion_ds):
        cache = ClipCache(motion_ds, "depth")
        w = class_weights(motion_ds.p_tilde, 0.5).w
        ev = evaluate_flow(oracle_predictor(cache, 8), cache, motion_ds.indices("test"), 8, w)
        assert ev.f1 == 1.0
        assert all(r <= motion_ds.codebook.bound / motion_ds.codebook.bins_per_axis for r in ev.rmse)

    def test_zero_flow_on_static_data(self):
        ds = build_dataset([static_program()], 3, 0)
        cache = ClipCache(ds, "depth")
        ev = evaluate_flow(zero_flow_predictor(cache, 8), cache, [0, 1, 2], 8, np.ones(125))
        assert ev.rmse == [0.0] * 8

    def test_zero_predictor_matches_closed_form(self, motion_ds):
        cache = ClipCache(motion_ds, "depth")
        ids = motion_ds.indices("val")
        ev = evaluate_flow(zero_flow_predictor(cache, 8), cache, ids, 8, np.ones(125))
        np.testing.assert_allclose(ev.rmse, zero_flow_rmse(motion_ds, ids, 8), atol=1e-12)


class TestTraining:
    def test_zero_epochs(self, small_ds):
        m = small_model()
        before = {k: v.copy() for k, v in m.state_arrays().items()}
        res = train_unsupervised(TrainConfig(epochs=0, horizon=3), small_ds, m)
        assert [r["split"] for r in res.log.rows] == ["val"]
        assert all(np.array_equal(before[k], v) for k, v in res.model.state_arrays().items())

    def test_geometry_mismatch_rejected(self, small_ds):
        with pytest.raises(ValueError, match="geometry"):
            train_unsupervised(TrainConfig(epochs=1, horizon=3), small_ds, MotionModel(ModelConfig(), seed=0))

    def test_step_changes_params_iff_gradient(self, small_ds):
        m = small_model()
        before = {k: v.data.copy() for k, v in m.params.items()}
        train_unsupervised(TrainConfig(epochs=1, steps_per_epoch=1, horizon=3, batch_size=2, weight_decay=0.0), small_ds, m)
        changed = {k for k, v in m.params.items() if not np.array_equal(v.data, before[k])}
        assert changed == set(m.params)

    def test_log_and_checkpoint(self, small_ds, tmp_path):
        cfg = TrainConfig(epochs=2, steps_per_epoch=2, horizon=3, batch_size=2, lr=1e-3)
        res = train_unsupervised(cfg, small_ds, small_model(), out_dir=tmp_path)
        assert [(r["step"], r["split"]) for r in res.log.rows] == [(0, "val"), (2, "train"), (2, "val"), (4, "train"), (4, "val")]
        text = (tmp_path / "metrics.csv").read_text()
        assert text == res.log.to_csv() and len(text.splitlines()) == 6
        model, meta = load_model(tmp_path / "checkpoint")
        assert meta["horizon"] == 3
        ev = eval_flow(tmp_path / "checkpoint", small_ds, "val")
        again = eval_flow(tmp_path / "checkpoint", small_ds, "val")
        assert ev.loss == again.loss and ev.rmse == again.rmse
        best_val = max(r["f1"] for r in res.log.split_rows("val"))
        assert ev.f1 == pytest.approx(best_val, abs=1e-12)

    def test_nonfinite_loss_aborts_with_seed(self, small_ds):
        m = small_model()
        m.params["dec.logits_bias"].data[:] = np.nan
        with pytest.raises(TrainingError, match=r"batch seed \(0, 0\)"):
            train_unsupervised(TrainConfig(epochs=1, steps_per_epoch=1, horizon=3, batch_size=2), small_ds, m)

    def test_reproducible(self, small_ds):
        cfg = TrainConfig(epochs=2, steps_per_epoch=2, horizon=3, batch_size=2, lr=1e-3)
        a = train_unsupervised(cfg, small_ds, small_model()).log.to_csv()
        b = train_unsupervised(cfg, small_ds, small_model()).log.to_csv()
        assert a == b

    def test_resume_matches_uninterrupted(self, small_ds, tmp_path):
        cfg = TrainConfig(epochs=3, steps_per_epoch=2, horizon=3, batch_size=2, lr=1e-3)
        full = train_unsupervised(cfg, small_ds, small_model(), out_dir=tmp_path / "full")
        part = TrainConfig(**{**cfg.__dict__, "max_steps": 3})
        train_unsupervised(part, small_ds, small_model(), out_dir=tmp_path / "split")
        resumed = train_unsupervised(cfg, small_ds, small_model(seed=99), out_dir=tmp_path / "split", resume=True)
        assert resumed.log.to_csv() == full.log.to_csv()
        assert (tmp_path / "split" / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()

    def test_resume_without_state(self, small_ds, tmp_path):
        with pytest.raises(TrainingError, match="resume"):
            train_unsupervised(TrainConfig(epochs=1, horizon=3), small_ds, small_model(), out_dir=tmp_path, resume=True)


def test_overfit_four_clips():
    # one-hot targets: with soft targets the loss cannot fall below their entropy
    ds = build_dataset([MotionProgram(0, "raise", "linear", {"vy": (-2.0, -1.0)})], 6, 0, SMALL, k_nn=1)
    ids = ds.indices("train")
    assert len(ids) == 4
    cache = ClipCache(ds, "depth")
    w = class_weights(ds.p_tilde, 0.5).w
    m = small_model()
    initial = evaluate_flow(model_predictor(m, 3), cache, ids, 3, w).loss
    cfg = TrainConfig(epochs=10, steps_per_epoch=50, horizon=3, batch_size=4, lr=3e-3, weight_decay=0.0, patience=100)
    train_unsupervised(cfg, ds, m)
    final = evaluate_flow(model_predictor(m, 3), cache, ids, 3, w).loss
    assert final <= 0.1 * initial
