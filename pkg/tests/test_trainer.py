import math

import numpy as np
import pytest

from dsta import checkpoint as ckpt_io
from dsta import numgrad as ng
from dsta import trainer as tr
from dsta.features import DatasetSpec, TauRule, synthesize
from dsta.model import ModelDims, init_params
from dsta.trainer import Adam, AdamConfig, ReduceLROnPlateau, SchedulerConfig, TrainConfig


def tiny_data(seed=0, n=6, signal=3.0):
    spec = DatasetSpec(train_pos=n // 2, train_neg=n - n // 2, test_pos=2, test_neg=2, T=10, fps=5, N=3, d=8,
                       tau_rule=TauRule("fixed", frame=9), seed=seed, signal=signal, ramp_seconds=1.0)
    return synthesize(spec)


def tiny_config(**kw):
    base = dict(learning_rate=1e-2, batch_size=3, epochs=2, d=8, init_std=0.1)
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def _params(self):
        return init_params(ModelDims(d=2, N=1, M=1, T=2), 0, std=1.0)

    def test_first_step_is_lr_times_sign(self):
        p = self._params()
        before = p["W_g"].data.copy()
        for t in p.tensors.values():
            t.grad = np.full_like(t.data, 3.0)
        Adam(p).step(0.1)
        np.testing.assert_allclose(p["W_g"].data, before - 0.1, atol=1e-8)

    def test_bias_correction_second_step(self):
        p = self._params()
        opt = Adam(p, AdamConfig(eps=0.0))
        x0 = p["B_0"].data.copy()
        for g in (1.0, 3.0):
            for t in p.tensors.values():
                t.grad = np.full_like(t.data, g)
            opt.step(1.0)
        m = (0.9 * 0.1 * 1.0 + 0.1 * 3.0) / (1 - 0.9**2)
        v = (0.999 * 0.001 * 1.0 + 0.001 * 9.0) / (1 - 0.999**2)
        np.testing.assert_allclose(p["B_0"].data, x0 - 1.0 - m / math.sqrt(v), rtol=1e-12)

    def test_zero_gradient_leaves_params(self):
        p = self._params()
        before = {k: v.copy() for k, v in p.arrays().items()}
        Adam(p).step(1.0)  # grads are None
        for k, v in p.arrays().items():
            np.testing.assert_array_equal(v, before[k])


class TestScheduler:
    def test_reduces_after_patience_exceeded(self):
        s = ReduceLROnPlateau(1.0, SchedulerConfig(factor=0.5, patience=2, min_lr=0.1))
        lrs = [s.step(v) for v in [5, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5]]
        assert lrs == [1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25, 0.25, 0.125, 0.125]
        assert [s.step(5) for _ in range(6)][-1] == 0.1

    def test_small_improvement_counts_as_plateau(self):
        s = ReduceLROnPlateau(1.0, SchedulerConfig(patience=0, threshold=1e-2))
        s.step(1.0)
        assert s.step(0.995) == 0.5
        assert s.step(0.9) == 0.5

    def test_state_round_trip(self):
        s = ReduceLROnPlateau(1.0, SchedulerConfig())
        s.step(3.0)
        s.step(4.0)
        t = ReduceLROnPlateau(9.0, SchedulerConfig())
        t.load_state(s.state())
        assert (t.lr, t.best, t.bad_epochs) == (1.0, 3.0, 1)


class TestTraining:
    def test_learning_rate_zero_keeps_init(self):
        data = tiny_data()
        cks = tr.train(tiny_config(learning_rate=0.0, epochs=1), data["train"], data["test"])
        init = init_params(cks[0].params.dims, 0, std=0.1)
        for k, t in cks[0].params.tensors.items():
            np.testing.assert_array_equal(t.data, init[k].data)

    def test_overfits_five_videos(self):
        spec = DatasetSpec(train_pos=2, train_neg=3, test_pos=0, test_neg=0, T=10, fps=5, N=3, d=8,
                           tau_rule=TauRule("fixed", frame=9), signal=0.5, ramp_seconds=1.0)
        five = synthesize(spec)["train"]
        cfg = tiny_config(epochs=100, batch_size=5, learning_rate=1e-2)
        _, initial = tr.predict(init_params(cfg.model_dims(five[0]), 0, std=0.1), five, 5, tr.LossConfig())
        cks = tr.train(cfg, five, five)
        assert min(c.metrics["train_loss"] for c in cks) < 0.01 * initial
        assert cks[-1].metrics["AP"] == 1.0
        lrs = [c.metrics["lr"] for c in cks]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_identical_runs_are_byte_identical(self, tmp_path):
        data = tiny_data()
        for name in ("a", "b"):
            tr.train(tiny_config(), data["train"], data["test"], run_dir=tmp_path / name)
        for f in ("epoch_001.ckpt", "epoch_002.ckpt", "metrics.csv", "config.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        data = tiny_data()
        full = tr.train(tiny_config(epochs=3), data["train"], data["test"])
        first = tr.train(tiny_config(epochs=1), data["train"], data["test"], run_dir=tmp_path)
        resumed = tr.train(tiny_config(epochs=3), data["train"], data["test"],
                           resume=ckpt_io.load(tmp_path / "epoch_001.ckpt"))
        assert [c.epoch for c in first + resumed] == [1, 2, 3]
        assert ckpt_io.dumps(resumed[-1]) == ckpt_io.dumps(full[-1])

    def test_metrics_csv(self, tmp_path):
        data = tiny_data()
        tr.train(tiny_config(), data["train"], data["test"], run_dir=tmp_path)
        rows = tr.read_metrics(tmp_path / "metrics.csv")
        assert [r["epoch"] for r in rows] == [1, 2]
        assert set(rows[0]) == set(tr.METRIC_COLUMNS)

    def test_divergence_is_reported(self, monkeypatch):
        data = tiny_data()

        def boom(*a, **k):
            raise ng.NonFiniteError("exp produced non-finite values")

        monkeypatch.setattr(tr, "forward_batch", boom)
        with pytest.raises(tr.TrainingDiverged, match="epoch 1 batch 0"):
            tr.train(tiny_config(), data["train"], data["test"])

    def test_input_validation(self):
        data = tiny_data()
        negatives = [s for s in data["test"] if s.label == 0]
        with pytest.raises(ValueError, match="positive and negative"):
            tr.train(tiny_config(), data["train"], negatives)
        with pytest.raises(ValueError):
            tr.train(tiny_config(), [], data["test"])
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rat": 1})

    def test_config_round_trip_and_window(self):
        cfg = tiny_config(scheduler=SchedulerConfig(patience=2))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        sample = tiny_data()["train"][0]
        assert cfg.model_dims(sample).M == 2  # round(0.5 s * 5 fps)
        assert TrainConfig(d=4).model_dims(sample).feat_dim == 8


class TestCheckpoint:
    def test_round_trip_and_corruption(self, tmp_path):
        data = tiny_data()
        ck = tr.train(tiny_config(epochs=1), data["train"], data["test"])[0]
        buf = ckpt_io.dumps(ck)
        back = ckpt_io.loads(buf)
        assert ckpt_io.dumps(back) == buf
        assert back.metrics == ck.metrics and back.epoch == 1
        with pytest.raises(ckpt_io.CheckpointError):
            ckpt_io.loads(b"XXXX" + buf[4:])
        with pytest.raises(ckpt_io.CheckpointError):
            ckpt_io.loads(buf[:-5])
        with pytest.raises(ckpt_io.CheckpointError):
            ckpt_io.loads(buf + b"\0")


class TestPareto:
    def test_frontier_endpoints(self):
        pts = [(0.72, 1.5), (0.537, 3.75), (0.60, 1.2)]
        assert tr.pareto_frontier(pts) == pts[:2]

    def test_identical_points_all_kept(self):
        assert tr.pareto_frontier([(0.7, 2.0)] * 3) == [(0.7, 2.0)] * 3

    def test_floors_and_domination(self):
        pts = [(0.9, 1.2), (0.8, 2.0), (0.85, 1.5), (0.7, 1.4), (0.95, 0.5), (0.4, 3.0), (0.8, 2.0)]
        assert tr.pareto_frontier(pts) == [(0.9, 1.2), (0.8, 2.0), (0.85, 1.5), (0.8, 2.0)]

    def test_accepts_dicts_and_rejects_empty(self):
        assert tr.pareto_frontier([{"AP": 0.6, "mTTA": 1.0}]) == [{"AP": 0.6, "mTTA": 1.0}]
        assert tr.pareto_frontier([(0.1, 0.1)]) == []
        with pytest.raises(ValueError):
            tr.pareto_frontier([])
