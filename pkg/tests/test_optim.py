"""Optimizer updates, splits, metrics, and training-loop semantics."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cellcounter import tensor as T
from cellcounter.models import CountConfig, FpnConfig, build_fpn, fpn_loss
from cellcounter.optim import (
    Adam,
    TrainReport,
    adam_step,
    metrics,
    split_dataset,
    train_counter,
    train_fpn,
)
from cellcounter.simdata import GenConfig, generate_sample
from cellcounter.tensor import Tape, Tensor, backward


@pytest.fixture(autouse=True)
def _float32_mode():
    T.set_default_dtype("float32")
    yield
    T.set_default_dtype("float32")


class TestAdam:
    def test_first_step_magnitude(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([1.0], dtype=p.dtype)
        opt = Adam(lr=1e-3)
        opt.step([("p", p)])
        assert abs(p.data[0] + 1e-3) < 1e-6

    def test_zero_grad_no_change(self):
        p = Tensor(np.array([2.5]), requires_grad=True)
        p.grad = np.zeros(1, dtype=p.dtype)
        Adam(lr=1e-3).step([("p", p)])
        assert p.data[0] == 2.5

    def test_none_grad_skipped(self):
        p = Tensor(np.array([2.5]), requires_grad=True)
        opt = Adam(lr=1e-3)
        opt.step([("p", p)])
        assert p.data[0] == 2.5
        assert "p" not in opt.m

    def test_quadratic_converges(self):
        T.set_default_dtype("float64")
        x = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam(lr=0.1)
        for _ in range(200):
            x.grad = None
            with Tape():
                loss = x.square().sum()
            backward(loss)
            adam_step([("x", x)], opt)
        assert abs(x.data[0]) < 1e-2

    def test_lr_zero_is_identity(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        before = p.data.copy()
        p.grad = rng.normal(size=(3, 3)).astype(p.dtype)
        Adam(lr=0.0).step([("p", p)])
        assert np.array_equal(p.data, before)

    def test_shape_drift_fatal(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.ones(3, dtype=p.dtype)
        opt = Adam()
        opt.step([("p", p)])
        q = Tensor(np.zeros(4), requires_grad=True)
        q.grad = np.ones(4, dtype=q.dtype)
        with pytest.raises(ValueError):
            opt.step([("p", q)])

    def test_state_round_trip(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam(lr=1e-2)
        for _ in range(3):
            p.grad = np.array([0.5], dtype=p.dtype)
            opt.step([("p", p)])
        state = opt.state_dict()
        assert state["step"] == 3
        opt2 = Adam(lr=1e-2)
        opt2.load_state(state)
        assert opt2.t == 3
        assert np.array_equal(opt2.m["p"], opt.m["p"])
        assert np.array_equal(opt2.v["p"], opt.v["p"])


class TestSplitDataset:
    def test_eighty_twenty(self):
        train, test = split_dataset(10, 0.8, seed=0)
        assert len(train) == 8 and len(test) == 2

    def test_same_seed_identical(self):
        assert split_dataset(50, 0.8, seed=4) == split_dataset(50, 0.8, seed=4)

    def test_different_seed_differs(self):
        assert split_dataset(50, 0.8, seed=1) != split_dataset(50, 0.8, seed=2)

    def test_partition_for_all_sizes(self):
        for n in range(1, 101):
            train, test = split_dataset(n, 0.8, seed=n)
            ids = sorted(train + test)
            assert ids == list(range(n))
            assert set(train).isdisjoint(test)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            split_dataset(0, 0.8, seed=0)


class TestMetrics:
    def test_perfect_predictions(self):
        t = np.array([1.0, 5.0, 9.0])
        m = metrics(t, np.zeros(3), t)
        assert m["r2"] == 1.0
        assert m["mse"] == 0.0
        assert m["l1_mean"] == 0.0
        assert m["ci_coverage"] == 1.0

    def test_mean_predictor_r2_zero(self):
        t = np.array([2.0, 4.0, 6.0, 8.0])
        p = np.full(4, t.mean())
        assert metrics(p, np.zeros(4), t)["r2"] == 0.0

    def test_hand_computed_example(self):
        m = metrics(np.array([1.0, 2.0, 3.0]), np.zeros(3), np.array([2.0, 2.0, 2.0]))
        assert m["l1_mean"] == pytest.approx(2.0 / 3.0)
        assert m["l1_max"] == 1.0
        assert m["ci_coverage"] == 1.0  # halfwidth 1.96 covers residual 1

    def test_constant_truths_r2_rule(self):
        t = np.array([3.0, 3.0])
        assert metrics(t, np.zeros(2), t)["r2"] == 1.0
        assert metrics(np.array([3.0, 4.0]), np.zeros(2), t)["r2"] == 0.0

    def test_r2_never_exceeds_one(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            t = rng.normal(size=6)
            p = rng.normal(size=6)
            assert metrics(p, np.zeros(6), t)["r2"] <= 1.0

    def test_coverage_monotone_in_logvar(self):
        rng = np.random.default_rng(4)
        p = rng.uniform(0, 10, size=8)
        t = rng.uniform(0, 10, size=8)
        s = rng.normal(size=8)
        prev = -1.0
        for bump in (0.0, 1.0, 2.0, 4.0, 8.0):
            cov = metrics(p, s + bump, t)["ci_coverage"]
            assert 0.0 <= cov <= 1.0
            assert cov >= prev
            prev = cov

    def test_length_mismatch_fatal(self):
        with pytest.raises(ValueError):
            metrics(np.zeros(3), np.zeros(3), np.zeros(4))

    def test_single_sample_fatal(self):
        with pytest.raises(ValueError):
            metrics(np.zeros(1), np.zeros(1), np.zeros(1))


def tiny_fpn_samples(n=2, hw=32, seed=0):
    cfg = GenConfig(render_hw=(hw * 2, hw * 2), output_hw=(hw, hw), count_range=(2, 5),
                    blur_sigmas=(1.0,), noise_std=4.0, mean_area=120.0, seed=seed)
    out = []
    for i in range(n):
        s = generate_sample(cfg, i)
        out.append((s.image, s.mask))
    return out


def tiny_count_samples(n=4, hw=32, seed=0):
    cfg = GenConfig(render_hw=(hw * 2, hw * 2), output_hw=(hw, hw), count_range=(1, 5),
                    blur_sigmas=(1.0,), noise_std=4.0, mean_area=120.0, seed=seed)
    out = []
    for i in range(n):
        s = generate_sample(cfg, i)
        out.append((s.mask, s.count))
    return out


TINY_FPN = FpnConfig(width_multiplier=0.05)
TINY_COUNT = CountConfig(width_multiplier=0.05, fc_dims=(16, 8, 1), input_hw=(32, 32))


class TestTrainFpn:
    def test_empty_dataset_fatal(self):
        with pytest.raises(ValueError):
            train_fpn([], config=TINY_FPN, epochs=1, log=None)

    def test_lr_zero_keeps_parameters(self):
        samples = tiny_fpn_samples()
        model, _ = train_fpn(samples, config=TINY_FPN, epochs=1, lr=0.0, batch=2, seed=1, log=None)
        fresh = build_fpn(TINY_FPN, seed=1)
        for (n, a), (_, b) in zip(model.registry.trainable(), fresh.registry.trainable()):
            assert np.array_equal(a.data, b.data), n

    def test_report_epochs_and_log_lines(self, capsys):
        samples = tiny_fpn_samples()
        _, report = train_fpn(samples, config=TINY_FPN, epochs=3, lr=1e-3, batch=2, seed=2)
        assert len(report.epochs) == 3
        assert report.best_epoch in (1, 2, 3)
        assert "mask_mse" in report.final
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("epoch=")]
        assert len(lines) == 3
        assert lines[0].startswith("epoch=1 loss=")
        assert " val=" in lines[0] and " sec=" in lines[0]

    def test_loss_decreases_on_average_over_50_steps(self):
        samples = tiny_fpn_samples(n=1)
        _, report = train_fpn(samples, config=TINY_FPN, epochs=50, lr=1e-3, batch=1, seed=3, log=None)
        losses = [e[1] for e in report.epochs]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_bit_reproducible(self):
        samples = tiny_fpn_samples()
        m1, _ = train_fpn(samples, config=TINY_FPN, epochs=2, lr=1e-3, batch=2, seed=4, log=None)
        m2, _ = train_fpn(samples, config=TINY_FPN, epochs=2, lr=1e-3, batch=2, seed=4, log=None)
        for (n, a), (_, b) in zip(m1.registry.items(), m2.registry.items()):
            assert np.array_equal(a.data, b.data), n

    def test_best_epoch_model_returned(self):
        samples = tiny_fpn_samples()
        model, report = train_fpn(samples, config=TINY_FPN, epochs=4, lr=1e-3, batch=2, seed=5, log=None)
        vals = [e[2] for e in report.epochs]
        assert report.best_epoch == int(np.argmin(vals)) + 1

    def test_report_csv_format(self, tmp_path):
        report = TrainReport(epochs=[(1, 0.5, 0.25, 1.0), (2, 0.4, 0.2, 1.1)], final={"mask_mse": 0.2})
        p = str(tmp_path / "r.csv")
        report.to_csv(p)
        lines = open(p).read().splitlines()
        assert lines[0] == "epoch,train_loss,val_metric,seconds"
        assert lines[1] == "1,0.500000,0.250000,1.000"
        assert len(lines) == 3


class TestTrainCounter:
    def test_empty_dataset_fatal(self):
        with pytest.raises(ValueError):
            train_counter([], config=TINY_COUNT, epochs=1, log=None)

    def test_runs_and_reports_metrics(self):
        samples = tiny_count_samples()
        model, report = train_counter(samples, config=TINY_COUNT, epochs=2, lr=1e-3,
                                      batch=2, seed=6, log=None)
        assert len(report.epochs) == 2
        for key in ("mse", "r2", "l1_mean", "l1_max", "ci_coverage"):
            assert key in report.final

    def test_lr_zero_keeps_parameters(self):
        samples = tiny_count_samples()
        from cellcounter.models import build_counter

        model, _ = train_counter(samples, config=TINY_COUNT, epochs=1, lr=0.0, batch=2,
                                 seed=7, log=None)
        fresh = build_counter(TINY_COUNT, seed=7)
        for (n, a), (_, b) in zip(model.registry.trainable(), fresh.registry.trainable()):
            assert np.array_equal(a.data, b.data), n

    def test_bit_reproducible(self):
        samples = tiny_count_samples()
        m1, _ = train_counter(samples, config=TINY_COUNT, epochs=2, lr=1e-3, batch=3, seed=8, log=None)
        m2, _ = train_counter(samples, config=TINY_COUNT, epochs=2, lr=1e-3, batch=3, seed=8, log=None)
        for (n, a), (_, b) in zip(m1.registry.items(), m2.registry.items()):
            assert np.array_equal(a.data, b.data), n

    def test_validation_split_used_for_final_metrics(self):
        train = tiny_count_samples(n=4, seed=1)
        val = tiny_count_samples(n=3, seed=2)
        _, report = train_counter(train, val, config=TINY_COUNT, epochs=1, lr=1e-3,
                                  batch=2, seed=9, log=None)
        assert "r2" in report.final
