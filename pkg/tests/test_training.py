"""Losses, optimizers, schedules, and the training loop contract."""
import math

import numpy as np
import pytest

from linearno import datasets, training
from linearno.model import CompleterOperator, OperatorConfig
from linearno.tensor import NumericsError, Tensor
from linearno.training import (AdamOptimizer, CompleterTask, RunReport, TrainConfig,
                               cosine_annealing_lr, mse, metric_rel_l2, metric_rel_mae,
                               onecycle_lr, relative_l2, train)


class TestLosses:
    def test_perfect_prediction_is_zero(self):
        t = np.random.default_rng(0).normal(size=(3, 5, 1))
        assert relative_l2(Tensor(t.copy()), t).item() == 0.0

    def test_zero_prediction_is_one(self):
        t = np.array([[[3.0], [4.0]]])
        loss = relative_l2(Tensor(np.zeros_like(t)), t)
        assert loss.item() == pytest.approx(1.0, abs=1e-15)

    def test_double_prediction_is_one(self):
        t = np.random.default_rng(1).normal(size=(4, 6, 1))
        loss = relative_l2(Tensor(2.0 * t), t)
        assert loss.item() == pytest.approx(1.0, rel=1e-12)

    def test_per_sample_then_mean(self):
        """Batch loss is the mean of the two per-sample relative errors."""
        t = np.ones((2, 4, 1))
        p = t.copy()
        p[0] += 1.0  # sample 0: rel err 1; sample 1: rel err 0
        assert relative_l2(Tensor(p), t).item() == pytest.approx(0.5, rel=1e-12)

    def test_zero_norm_target_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            relative_l2(Tensor(np.ones((1, 3, 1))), np.zeros((1, 3, 1)))

    def test_gradient_direction(self):
        """d/dp ||p - t|| points along (p - t)."""
        rng = np.random.default_rng(3)
        t = rng.normal(size=(2, 5, 1))
        p = Tensor(rng.normal(size=(2, 5, 1)), requires_grad=True)
        relative_l2(p, t).backward()
        for b in range(2):
            diff = p.data[b] - t[b]
            expected = diff / np.linalg.norm(diff) / np.linalg.norm(t[b]) / 2
            np.testing.assert_allclose(p.grad[b], expected, rtol=1e-10)

    def test_mse_matches_numpy(self):
        rng = np.random.default_rng(4)
        p, t = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
        assert mse(Tensor(p), t).item() == pytest.approx(np.mean((p - t) ** 2), rel=1e-14)

    def test_metrics_match_losses(self):
        rng = np.random.default_rng(5)
        p, t = rng.normal(size=(4, 7, 1)), rng.normal(size=(4, 7, 1))
        assert metric_rel_l2(p, t) == pytest.approx(relative_l2(Tensor(p), t).item(), rel=1e-12)
        assert metric_rel_mae(t, t) == 0.0


class TestSchedules:
    def test_cosine_endpoints(self):
        assert cosine_annealing_lr(0, 100, 1e-3) == 1e-3
        assert cosine_annealing_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-19)

    def test_cosine_closed_form_everywhere(self):
        for step in range(0, 101):
            expected = 1e-3 * (1 + math.cos(math.pi * step / 100)) / 2
            assert abs(cosine_annealing_lr(step, 100, 1e-3) - expected) < 1e-12

    def test_onecycle_start_is_base_over_25(self):
        assert onecycle_lr(0, 100, 1e-3) == 1e-3 / 25

    def test_onecycle_peak_exact_at_30_percent(self):
        assert onecycle_lr(30, 100, 1e-3) == 1e-3

    def test_onecycle_final_floor(self):
        assert onecycle_lr(100, 100, 1e-3) == 1e-3 / 1e4

    def test_onecycle_warmup_is_linear(self):
        lrs = [onecycle_lr(s, 100, 1e-3) for s in range(31)]
        diffs = np.diff(lrs)
        np.testing.assert_allclose(diffs, diffs[0], rtol=1e-9)

    def test_zero_total_steps_rejected(self):
        for fn in (onecycle_lr, cosine_annealing_lr, training.constant_lr):
            with pytest.raises(ValueError):
                fn(0, 0, 1e-3)


class TestAdam:
    def test_zero_gradient_no_decay_is_identity(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        opt = AdamOptimizer({"p": p}, weight_decay=0.0)
        opt.step(1e-2)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_constant_gradient_approaches_sign_step(self):
        """With a fixed gradient, |update| -> lr (Adam's sign-like limit)."""
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([0.37])
        opt = AdamOptimizer({"p": p}, weight_decay=0.0)
        lr = 1e-3
        for _ in range(200):
            prev = p.data.copy()
            opt.step(lr)
        assert abs((prev - p.data)[0] - lr) < 1e-5

    def test_three_steps_match_hand_computation(self):
        """Scalar parameter, fixed gradient 1.0, lr 0.1: spreadsheet oracle."""
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
        theta, m, v = 1.0, 0.0, 0.0
        expected = []
        for t in range(1, 4):
            g = 1.0
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            theta -= lr * mhat / (math.sqrt(vhat) + eps)
            expected.append(theta)

        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamOptimizer({"p": p}, weight_decay=0.0)
        got = []
        for _ in range(3):
            p.grad = np.array([1.0])
            opt.step(lr)
            got.append(p.data[0])
        np.testing.assert_allclose(got, expected, rtol=1e-14)

    def test_decoupled_decay_shrinks_before_update(self):
        p = Tensor(np.array([10.0]), requires_grad=True)
        p.grad = np.array([0.0])
        opt = AdamOptimizer({"p": p}, weight_decay=0.1, decoupled=True)
        opt.step(0.5)
        # zero gradient: only the multiplicative decay acts
        assert p.data[0] == pytest.approx(10.0 * (1 - 0.5 * 0.1), rel=1e-15)

    def test_plain_adam_ignores_weight_decay(self):
        p = Tensor(np.array([10.0]), requires_grad=True)
        p.grad = np.array([0.0])
        opt = AdamOptimizer({"p": p}, weight_decay=0.1, decoupled=False)
        opt.step(0.5)
        assert p.data[0] == 10.0

    def test_nan_gradient_aborts_with_name(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        opt = AdamOptimizer({"bad_param": p})
        with pytest.raises(NumericsError, match="bad_param"):
            opt.step(1e-3)

    def test_clip_bounds_global_norm(self):
        a = Tensor(np.array([3.0]), requires_grad=True)
        b = Tensor(np.array([4.0]), requires_grad=True)
        a.grad, b.grad = np.array([3.0]), np.array([4.0])
        opt = AdamOptimizer({"a": a, "b": b}, clip_norm=1.0)
        opt._clip()
        norm = math.sqrt(a.grad[0] ** 2 + b.grad[0] ** 2)
        assert norm <= 1.0 + 1e-9
        # direction preserved
        assert a.grad[0] / b.grad[0] == pytest.approx(0.75, rel=1e-12)


def smoke_setup(tmp_path, **data_kw):
    base = dict(n_x=16, n_t=9, samples_train=8, samples_val=4, samples_test=4,
                rate=0.25, seed=21)
    base.update(data_kw)
    spec = datasets.DataSpec(**base)
    paths = datasets.write_dataset(spec, tmp_path)
    return spec, paths


def tiny_model(seed=0, **kw):
    base = dict(coord_dim=2, func_dim=1, out_dim=1, dim=16, layers=2, slices=4, heads=2)
    base.update(kw)
    return CompleterOperator(OperatorConfig(**base), seed=seed)


class TestLoop:
    def test_smoke_run_and_report(self, tmp_path):
        _, paths = smoke_setup(tmp_path / "d")
        tr = datasets.load_completer_split(paths["train"])
        va = datasets.load_completer_split(paths["val"])
        model = tiny_model()
        cfg = TrainConfig(epochs=3, lr=1e-3, batch_size=4, seed=0, schedule="constant")
        report, best = train(CompleterTask(model, tr), CompleterTask(model, va), cfg,
                             out_dir=tmp_path / "run")
        assert len(report.records) == 3
        for rec in report.records:
            assert set(rec) == {"epoch", "lr", "train_loss", "val_loss", "wall_ms"}
            assert math.isfinite(rec["train_loss"]) and math.isfinite(rec["val_loss"])
        assert report.summary["best_val"] <= report.records[0]["val_loss"]
        assert (tmp_path / "run" / "best.lnoc").exists()
        assert (tmp_path / "run" / "report.jsonl").exists()

    def test_determinism_bit_identical(self, tmp_path):
        _, paths = smoke_setup(tmp_path / "d")
        tr = datasets.load_completer_split(paths["train"])
        va = datasets.load_completer_split(paths["val"])
        cfg = TrainConfig(epochs=2, lr=1e-3, batch_size=4, seed=7)

        outs = []
        for name in ("a", "b"):
            model = tiny_model(seed=3)
            report, _ = train(CompleterTask(model, tr), CompleterTask(model, va), cfg,
                              out_dir=tmp_path / name)
            outs.append((report.fingerprint(), open(tmp_path / name / "last.lnoc", "rb").read()))
        assert outs[0][0] == outs[1][0]
        assert outs[0][1] == outs[1][1]

    @pytest.mark.parametrize("gen,sim", [(False, False), (True, False),
                                         (False, True), (True, True)])
    def test_loss_decreases_on_smoke_task(self, tmp_path, gen, sim):
        """Median train loss over the last tenth of the run beats the
        first tenth for every ablation row of the attention grid."""
        _, paths = smoke_setup(tmp_path / "d")
        tr = datasets.load_completer_split(paths["train"])
        va = datasets.load_completer_split(paths["val"])
        model = tiny_model(seed=1, mechanism="linearno",
                           generalization=gen, simplification=sim)
        cfg = TrainConfig(epochs=30, lr=2e-3, batch_size=8, seed=0, schedule="cosine")
        report, _ = train(CompleterTask(model, tr), CompleterTask(model, va), cfg)
        losses = [r["train_loss"] for r in report.records]
        third = len(losses) // 10 or 1
        assert np.median(losses[-third:]) < np.median(losses[:third])

    def test_resume_matches_uninterrupted(self, tmp_path):
        _, paths = smoke_setup(tmp_path / "d")
        tr = datasets.load_completer_split(paths["train"])
        va = datasets.load_completer_split(paths["val"])
        cfg = TrainConfig(epochs=4, lr=1e-3, batch_size=4, seed=5, schedule="onecycle")

        model_full = tiny_model(seed=9)
        full, _ = train(CompleterTask(model_full, tr), CompleterTask(model_full, va), cfg,
                        out_dir=tmp_path / "full")

        # same config, interrupted after 2 of 4 epochs, then resumed
        model_half = tiny_model(seed=9)
        half, _ = train(CompleterTask(model_half, tr), CompleterTask(model_half, va), cfg,
                        out_dir=tmp_path / "half", stop_after=2)
        assert half.summary["completed"] is False
        model_resume = tiny_model(seed=9)
        resumed, _ = train(CompleterTask(model_resume, tr), CompleterTask(model_resume, va),
                           cfg, out_dir=tmp_path / "resumed",
                           resume=str(tmp_path / "half" / "last.lnoc"))
        assert resumed.fingerprint() == full.fingerprint()
        np.testing.assert_array_equal(
            np.frombuffer(open(tmp_path / "full" / "last.lnoc", "rb").read(), np.uint8),
            np.frombuffer(open(tmp_path / "resumed" / "last.lnoc", "rb").read(), np.uint8))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_abort_reports_location(self, tmp_path):
        _, paths = smoke_setup(tmp_path / "d")
        tr = datasets.load_completer_split(paths["train"])
        va = datasets.load_completer_split(paths["val"])
        model = tiny_model(seed=2)
        for p in model.params.values():
            p.data *= 1e200  # guarantee overflow in the first forward
        cfg = TrainConfig(epochs=1, lr=1.0, batch_size=4, seed=0)
        with pytest.raises(NumericsError, match=r"epoch 0, step \d"):
            train(CompleterTask(model, tr), CompleterTask(model, va), cfg)

    def test_overfits_four_samples(self, tmp_path):
        """Memorization oracle: a correct implementation drives 4-sample
        train relative L2 below 0.01 in 500 epochs (seeds pinned; the
        spec-mandated std-0.02 init makes tiny-model convergence slow, so
        the margin is real but not huge)."""
        from linearno.model import SelfOperator
        from linearno.training import SelfTask

        spec = datasets.DataSpec(n_x=16, n_t=5, samples_train=4, samples_val=2,
                                 samples_test=2, rate=0.25, seed=33, nu=0.05, t_end=0.5)
        paths = datasets.write_dataset(spec, tmp_path / "d")
        slf = datasets.load_self_split(paths["train"])
        model = SelfOperator(OperatorConfig(coord_dim=2, func_dim=1, out_dim=1,
                                            dim=32, layers=2, slices=16, heads=2), seed=1)
        cfg = TrainConfig(epochs=500, lr=0.1, batch_size=4, seed=0,
                          schedule="onecycle", loss="rel_l2", weight_decay=0.0)
        task = SelfTask(model, slf)
        report, _ = train(task, task, cfg)
        assert report.records[-1]["train_loss"] < 0.01, (
            f"failed to memorize: final train loss {report.records[-1]['train_loss']:.4f}")


class TestConfigValidation:
    def test_bad_optimizer(self):
        with pytest.raises(ValueError, match="optimizer"):
            TrainConfig(optimizer="sgd")

    def test_bad_schedule(self):
        with pytest.raises(ValueError, match="schedule"):
            TrainConfig(schedule="step")

    def test_bad_loss(self):
        with pytest.raises(ValueError, match="loss"):
            TrainConfig(loss="l1")

    def test_bad_lr(self):
        with pytest.raises(ValueError, match="lr"):
            TrainConfig(lr=0.0)


class TestReport:
    def test_jsonl_roundtrip(self, tmp_path):
        rep = RunReport(records=[{"epoch": 0, "lr": 1e-3, "train_loss": 0.5,
                                  "val_loss": 0.6, "wall_ms": 12.0}],
                        summary={"best_val": 0.6, "wall_s": 1.0})
        path = tmp_path / "r.jsonl"
        rep.write(path)
        back = RunReport.read(path)
        assert back.records == rep.records
        assert back.summary == rep.summary

    def test_fingerprint_ignores_wall_time(self):
        a = RunReport(records=[{"epoch": 0, "train_loss": 0.5, "wall_ms": 1.0}],
                      summary={"best_val": 0.5, "wall_s": 2.0})
        b = RunReport(records=[{"epoch": 0, "train_loss": 0.5, "wall_ms": 99.0}],
                      summary={"best_val": 0.5, "wall_s": 5.0})
        assert a.fingerprint() == b.fingerprint()
        c = RunReport(records=[{"epoch": 0, "train_loss": 0.6, "wall_ms": 1.0}],
                      summary={"best_val": 0.5, "wall_s": 2.0})
        assert a.fingerprint() != c.fingerprint()
