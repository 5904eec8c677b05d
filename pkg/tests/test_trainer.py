"""Optimizer math, schedule shape, clipping, and the training loop."""

import json
import math

import numpy as np
import pytest

import apf.data as da
import apf.model as mdl
import apf.trainer as tr
from apf.errors import ConfigError, NumericError
from apf.tensor import Parameters


def tiny_dataset():
    spec = da.SynthSpec(
        num_videos=6,
        num_classes=3,
        feature_dim=8,
        min_len=32,
        max_len=40,
        noise=0.2,
        min_segments=1,
        max_segments=2,
        min_seg_len=8,
        max_seg_len=12,
        seed=3,
    )
    return da.generate(spec)


def tiny_model():
    cfg = mdl.ModelConfig(
        feature_dim=8,
        num_classes=3,
        model_dim=8,
        heads=2,
        enc_layers=1,
        dec_layers=1,
        num_queries=4,
        mlp_ratio=2,
        window=3,
        enc_shift=3,
        dec_shift=3,
    )
    return cfg, mdl.build_model(cfg, seed=1)


class TestAdamW:
    def test_single_step_hand_computed(self):
        p = Parameters()
        t = p.add("w", np.array([1.0]))
        t.grad = np.array([0.5])
        opt = tr.AdamW(p, weight_decay=0.1)
        opt.step(lr=0.1)
        # mhat = 0.5, vhat = 0.25; 1 - 0.1*0.1*1 - 0.1*0.5/(0.5 + 1e-8)
        want = 1.0 - 0.01 - 0.1 * 0.5 / (0.5 + 1e-8)
        assert t.data[0] == pytest.approx(want, abs=1e-15)

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        p = Parameters()
        t = p.add("w", rng.standard_normal(5))
        start = t.data.copy()
        opt = tr.AdamW(p, weight_decay=0.01)
        grads = [rng.standard_normal(5) for _ in range(5)]

        theta = start.copy()
        m = np.zeros(5)
        v = np.zeros(5)
        for k, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta = theta - 0.05 * 0.01 * theta - 0.05 * (m / (1 - 0.9**k)) / (
                np.sqrt(v / (1 - 0.999**k)) + 1e-8
            )

        for g in grads:
            t.grad = g.copy()
            opt.step(lr=0.05)
        np.testing.assert_allclose(t.data, theta, atol=1e-14)

    def test_missing_gradient_skips_parameter(self):
        p = Parameters()
        t = p.add("w", np.array([2.0]))
        tr.AdamW(p, weight_decay=0.5).step(lr=0.1)
        assert t.data[0] == 2.0

    def test_zero_gradient_still_decays(self):
        p = Parameters()
        t = p.add("w", np.array([2.0]))
        t.grad = np.zeros(1)
        tr.AdamW(p, weight_decay=0.5).step(lr=0.1)
        assert t.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)


class TestSchedule:
    def test_warmup_is_linear(self):
        assert tr.lr_at(0, 100, 1.0, 10) == pytest.approx(0.1)
        assert tr.lr_at(4, 100, 1.0, 10) == pytest.approx(0.5)
        assert tr.lr_at(9, 100, 1.0, 10) == pytest.approx(1.0)

    def test_cosine_tail(self):
        assert tr.lr_at(10, 100, 1.0, 10) == pytest.approx(1.0)
        assert tr.lr_at(55, 100, 1.0, 10) == pytest.approx(0.5)
        assert 0.0 < tr.lr_at(99, 100, 1.0, 10) < 0.01

    def test_no_warmup_starts_at_base(self):
        assert tr.lr_at(0, 50, 2.0, 0) == pytest.approx(2.0)

    def test_monotone_after_warmup(self):
        values = [tr.lr_at(s, 200, 1.0, 20) for s in range(20, 200)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestClip:
    def test_scales_to_max_norm(self):
        p = Parameters()
        t = p.add("w", np.zeros(2))
        t.grad = np.array([3.0, 4.0])
        norm = tr.clip_gradients(p, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(t.grad, [0.6, 0.8])

    def test_small_gradients_untouched(self):
        p = Parameters()
        t = p.add("w", np.zeros(2))
        t.grad = np.array([0.3, 0.4])
        tr.clip_gradients(p, 1.0)
        np.testing.assert_allclose(t.grad, [0.3, 0.4])

    def test_non_finite_raises(self):
        p = Parameters()
        t = p.add("w", np.zeros(1))
        t.grad = np.array([np.inf])
        with pytest.raises(NumericError):
            tr.clip_gradients(p, 1.0)


class TestTargets:
    def test_normalizes_by_duration(self):
        v = da.Video("x", np.zeros((10, 2)), duration=20.0,
                     annotations=[{"segment": [5.0, 15.0], "label": 1}])
        segs, labels = tr.video_targets(v)
        np.testing.assert_allclose(segs, [[0.25, 0.75]])
        np.testing.assert_array_equal(labels, [1])

    def test_empty(self):
        segs, labels = tr.video_targets(da.Video("x", np.zeros((4, 2)), 4.0))
        assert segs.shape == (0, 2) and labels.size == 0


class TestPredict:
    def test_detection_layout(self):
        cfg, params = tiny_model()
        video = tiny_dataset()[0]
        dets = tr.predict_video(video, params, cfg)
        assert len(dets) == cfg.num_queries * cfg.num_classes
        scores = [d["score"] for d in dets]
        assert scores == sorted(scores, reverse=True)
        for d in dets:
            assert 0.0 <= d["segment"][0] <= d["segment"][1] <= video.duration + 1e-9
            assert 0 <= d["label"] < 3
        assert len(tr.predict_video(video, params, cfg, top_k=5)) == 5


class TestTrainConfig:
    def test_round_trip(self):
        tcfg = tr.TrainConfig(epochs=4, warmup_epochs=1, lr=0.01)
        assert tr.TrainConfig.from_dict(tcfg.to_dict()) == tcfg

    def test_validation(self):
        with pytest.raises(ConfigError):
            tr.TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            tr.TrainConfig(warmup_epochs=31)
        with pytest.raises(ConfigError):
            tr.TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            tr.TrainConfig.from_dict({"bogus": 1})


class TestTrainLoop:
    def run(self, out_dir, epochs=3):
        videos = tiny_dataset()
        cfg, params = tiny_model()
        tcfg = tr.TrainConfig(
            epochs=epochs, batch_size=2, lr=3e-3, warmup_epochs=1, val_fraction=0.34, seed=11
        )
        result = tr.train_loop(videos, cfg, params, tcfg, out_dir=out_dir)
        return result

    def test_record_layout_and_files(self, tmp_path):
        result = self.run(tmp_path)
        assert len(result.records) == 3
        for r in result.records:
            assert set(r) == {"epoch", "step", "lr", "loss", "loss_cls", "loss_reg", "loss_l1", "val_map"}
            assert math.isfinite(r["loss"])
            assert r["loss"] == pytest.approx(r["loss_cls"] + r["loss_reg"] + r["loss_l1"], abs=1e-9)
        lines = (tmp_path / "train_log.ndjson").read_text().splitlines()
        assert len(lines) == 3
        assert [json.loads(l)["epoch"] for l in lines] == [0, 1, 2]
        cfg_back, params_back, extra = mdl.restore_model(tmp_path / "best.ckpt")
        assert extra["epoch"] == result.best_epoch
        assert (tmp_path / "last.ckpt").exists()

    def test_replay_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        ra = self.run(a)
        rb = self.run(b)
        assert (a / "train_log.ndjson").read_bytes() == (b / "train_log.ndjson").read_bytes()
        assert (a / "best.ckpt").read_bytes() == (b / "best.ckpt").read_bytes()
        assert (a / "last.ckpt").read_bytes() == (b / "last.ckpt").read_bytes()
        assert ra.best_val_map == rb.best_val_map

    def test_no_val_split_keeps_final_weights(self, tmp_path):
        videos = tiny_dataset()
        cfg, params = tiny_model()
        tcfg = tr.TrainConfig(epochs=2, batch_size=3, lr=1e-3, warmup_epochs=0, val_fraction=0.0, seed=1)
        result = tr.train_loop(videos, cfg, params, tcfg, out_dir=tmp_path)
        assert result.best_val_map is None
        assert result.best_epoch == 1
        assert all(r["val_map"] is None for r in result.records)
        _, _, extra = mdl.restore_model(tmp_path / "best.ckpt")
        assert extra["epoch"] == 1

    def test_non_finite_parameters_raise_numeric_error(self):
        videos = tiny_dataset()
        cfg, params = tiny_model()
        params["queries.embed"].data[:] = 1e200
        tcfg = tr.TrainConfig(epochs=1, batch_size=2, lr=1e-3, warmup_epochs=0, seed=0)
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            tr.train_loop(videos, cfg, params, tcfg)

    def test_step_counter_spans_epochs(self, tmp_path):
        result = self.run(tmp_path)
        # 4 train videos in batches of 2 is 2 steps per epoch
        assert [r["step"] for r in result.records] == [2, 4, 6]
