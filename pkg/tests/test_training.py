import math

import numpy as np
import pytest

from scenematch import autograd as ag
from scenematch.autograd import Tensor
from scenematch.synth import PairConfig, SyntheticDataset
from scenematch import training as tr

SMALL = dict(C=8, layers=1, scale_dims=(4, 4, 4, 4), batch_size=2, total_steps=6, warmup_steps=2,
             sinkhorn_iters=10, infer_iters=10, checkpoint_every=2)


def small_data(count=8, **kw):
    return SyntheticDataset(PairConfig(M=12, N=12, scale_dims=(4, 4, 4, 4), **kw), 0, count)


class TestSchedule:
    def test_endpoints(self):
        cfg = tr.TrainConfig(base_lr=1e-3, warmup_steps=100, total_steps=2000)
        assert tr.lr_at(0, cfg) == 0.0
        assert tr.lr_at(100, cfg) == pytest.approx(1e-3, abs=1e-18)
        assert tr.lr_at(2000, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_warmup_linear_and_decay_monotone(self):
        cfg = tr.TrainConfig(warmup_steps=10, total_steps=50)
        assert tr.lr_at(5, cfg) == pytest.approx(0.5 * cfg.base_lr)
        decay = [tr.lr_at(k, cfg) for k in range(10, 51)]
        assert all(a >= b for a, b in zip(decay, decay[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            tr.lr_at(-1, tr.TrainConfig())

    def test_bad_config(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(warmup_steps=10, total_steps=10)


def hand_trace(x, lr, wd, steps):
    """Scalar AdamW on f(x) = x^2 written out with plain floats."""
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9 ** t)
        v_hat = v / (1 - 0.999 ** t)
        x = x * (1 - lr * wd)
        x = x - lr * m_hat / (math.sqrt(v_hat) + 1e-8)
    return x


class TestAdamW:
    def test_zero_gradient_zero_decay(self):
        p = Tensor(np.array([1.0, -2.0]), True)
        tr.adamw_step([("p", p)], {"p": np.zeros(2)}, tr.AdamState(), 0.1, 0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_descent(self):
        p = Tensor(np.array(1.0), True)
        tr.adamw_step([("p", p)], {"p": 2 * p.data}, tr.AdamState(), 0.1, 0.0)
        assert 0 < p.data < 1

    def test_hand_trace(self):
        p = Tensor(np.array(1.0), True)
        state = tr.AdamState()
        for _ in range(3):
            tr.adamw_step([("p", p)], {"p": 2 * p.data}, state, 0.05, 0.1)
        assert abs(float(p.data) - hand_trace(1.0, 0.05, 0.1, 3)) < 1e-10

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(2), True)
        with pytest.raises(ag.DimensionError):
            tr.adamw_step([("p", p)], {"p": np.zeros(3)}, tr.AdamState(), 0.1, 0.0)


class TestTrain:
    def test_two_runs_identical(self, tmp_path):
        cfg = tr.TrainConfig(**{**SMALL, "total_steps": 4})
        a, rows_a = tr.train(cfg, small_data(), tmp_path / "a.ckpt", tmp_path / "a.csv")
        b, rows_b = tr.train(cfg, small_data(), tmp_path / "b.ckpt", tmp_path / "b.csv")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
        assert rows_a == rows_b

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = tr.TrainConfig(**SMALL)
        full, _ = tr.train(cfg, small_data())
        part, _ = tr.train(cfg, small_data(), tmp_path / "p.ckpt", until=3)
        resumed, _ = tr.train(cfg, small_data(), resume=tr.load_checkpoint(tmp_path / "p.ckpt"))
        assert part.step == 3 and resumed.step == full.step == 6
        assert tr.checkpoint_bytes(resumed) == tr.checkpoint_bytes(full)

    def test_log_columns(self, tmp_path):
        cfg = tr.TrainConfig(**{**SMALL, "total_steps": 3})
        tr.train(cfg, small_data(), log_path=tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "step,loss,feature_loss,scene_loss,lr,grad_norm"
        assert len(lines) == 4

    def test_fixed_batch_loss_decreases(self):
        pair = small_data(1, sigma=0.0)[0]
        cfg = tr.TrainConfig(**{**SMALL, "total_steps": 51, "warmup_steps": 1, "base_lr": 3e-3,
                                "weight_decay": 0.0})
        fixed = [pair] * 2
        _, rows = tr.train(cfg, fixed, until=50)
        losses = [r["loss"] for r in rows]
        assert len(losses) == 50
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_non_finite_aborts_and_keeps_checkpoint(self, tmp_path):
        cfg = tr.TrainConfig(**SMALL)
        path = tmp_path / "c.ckpt"
        ckpt, _ = tr.train(cfg, small_data(), path, until=2)
        before = path.read_bytes()
        ckpt.params["dustbin"].data = np.array(np.inf)
        with pytest.raises(tr.TrainingAborted):
            tr.train(cfg, small_data(), path, resume=ckpt)
        assert path.read_bytes() == before


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        cfg = tr.TrainConfig(**{**SMALL, "total_steps": 2, "warmup_steps": 1})
        ckpt, _ = tr.train(cfg, small_data())
        raw = tr.checkpoint_bytes(ckpt)
        assert tr.checkpoint_bytes(tr.parse_checkpoint(raw)) == raw
        tr.save_checkpoint(ckpt, tmp_path / "x.ckpt")
        assert tr.load_checkpoint(tmp_path / "x.ckpt").step == 2

    def test_corrupt(self):
        cfg = tr.TrainConfig(**{**SMALL, "total_steps": 2, "warmup_steps": 1})
        raw = tr.checkpoint_bytes(tr.Checkpoint(*_fresh(cfg)))
        with pytest.raises(ValueError):
            tr.parse_checkpoint(b"garbage!" + raw[8:])
        with pytest.raises(ValueError):
            tr.parse_checkpoint(raw + b"\x00")

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        tr.atomic_write(tmp_path / "f.txt", "hello")
        assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]


def _fresh(cfg):
    from scenematch.model import init_params

    return init_params(cfg.model_config(), cfg.seed), tr.AdamState(), 0, cfg


def test_batch_indices_wrap():
    assert tr.batch_indices(3, 4, 10) == [2, 3, 4, 5]
