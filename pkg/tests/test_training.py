"""Taylor-link loss, sampling, freeze schedule, divergence handling."""

import logging

import numpy as np
import pytest

from demandgrid import tensor as T
from demandgrid.model import DemandForecaster, ModelConfig, group_names
from demandgrid.tensor import Tensor
from demandgrid.training import (
    SampleDrawer,
    TrainConfig,
    TrainingDiverged,
    learning_rate,
    loss,
    market_shares,
    taylor_link,
    train,
)

FAST = dict(near_epochs=2, far_epochs=1, samples_per_epoch=64, batch_size=16)


def small_model(schema, seed=0):
    return DemandForecaster(ModelConfig.for_schema(schema, seed=seed, dropout=0.0), schema)


class TestTaylorLink:
    """v(x) = 1 + x + x^2/2 + x^3/6."""

    def test_exact_values(self):
        assert taylor_link(0.0) == 1.0
        assert taylor_link(1.0) == 8.0 / 3.0
        assert taylor_link(-1.0) == 1.0 / 3.0

    def test_tensor_matches_array(self):
        x = np.linspace(-2, 3, 11)
        np.testing.assert_allclose(taylor_link(Tensor(x)).data, taylor_link(x), rtol=1e-15)

    def test_monotone_on_log_demand(self):
        x = np.linspace(0, 10, 1001)
        assert (np.diff(taylor_link(x)) > 0).all()


class TestLoss:
    """Weighted squared difference on the link scale, averaged over the batch."""

    def test_value(self):
        rng = np.random.default_rng(0)
        pred, target = rng.uniform(0, 2, (3, 4, 2)), rng.uniform(0, 2, (3, 4, 2))
        w = (rng.random((3, 4, 2)) > 0.3).astype(float)
        gam = np.array([0.7, 0.3])
        expect = ((taylor_link(pred) - taylor_link(target)) ** 2 * w * gam).sum() / 3
        assert float(loss(Tensor(pred), target, w, gam).data) == pytest.approx(expect, rel=1e-14)

    def test_masked_weeks_have_zero_gradient(self):
        rng = np.random.default_rng(1)
        pred = Tensor(rng.uniform(0, 2, (2, 5, 2)), requires_grad=True)
        target = rng.uniform(0, 2, (2, 5, 2))
        w = np.ones((2, 5, 2))
        w[0, 1:3] = 0.0
        w[1, :, 1] = 0.0
        with T.Tape() as tape:
            L = loss(pred, target, w, [0.5, 0.5])
        g = tape.backward(L)[pred]
        assert (g[w == 0] == 0).all()
        assert (g[w == 1] != 0).all()

    def test_masked_target_values_irrelevant(self):
        rng = np.random.default_rng(2)
        pred = Tensor(rng.uniform(0, 2, (2, 3, 1)))
        target = rng.uniform(0, 2, (2, 3, 1))
        w = np.ones((2, 3, 1))
        w[0, 0] = 0
        other = target.copy()
        other[0, 0] = 1e3
        assert float(loss(pred, target, w, [1.0]).data) == float(loss(pred, other, w, [1.0]).data)

    def test_nan_rejected(self):
        with pytest.raises(FloatingPointError):
            loss(Tensor(np.full((1, 1, 1), np.nan)), np.zeros((1, 1, 1)), np.ones((1, 1, 1)), [1.0])


class TestConfigAndSchedule:
    """TrainConfig validation and the cosine learning-rate schedule."""

    @pytest.mark.parametrize(
        "kw",
        [dict(near_epochs=0), dict(learning_rate=0), dict(lr_schedule="step"), dict(market_weights=(0.5, 0.6))],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()

    def test_cosine_endpoints(self):
        cfg = TrainConfig(learning_rate=1e-2, lr_floor=0.1)
        assert learning_rate(cfg, 0, 11) == pytest.approx(1e-2)
        assert learning_rate(cfg, 10, 11) == pytest.approx(1e-3)
        assert learning_rate(cfg, 5, 11) == pytest.approx(5.5e-3)

    def test_constant(self):
        cfg = TrainConfig(learning_rate=3e-3, lr_schedule="constant")
        assert {learning_rate(cfg, s, 10) for s in range(10)} == {3e-3}


class TestSampling:
    """Training samples never look beyond the cutoff."""

    def test_origins_within_bounds(self, small_builder):
        cfg = TrainConfig()
        drawer = SampleDrawer(small_builder, np.arange(small_builder.n_articles), 50, cfg)
        arts, origins = drawer.epoch(500, np.random.default_rng(0))
        assert origins.max() <= 49
        for a, o in zip(arts, origins):
            assert o >= small_builder.first_origin(a)

    def test_cycles_small_sets(self, small_builder):
        drawer = SampleDrawer(small_builder, [0, 1, 2], 50, TrainConfig())
        arts, _ = drawer.epoch(9, np.random.default_rng(0))
        assert sorted(np.bincount(arts)) == [3, 3, 3]

    def test_recent_origins(self, small_builder):
        drawer = SampleDrawer(small_builder, np.arange(10), 60, TrainConfig(recent_origins=5))
        _, origins = drawer.epoch(200, np.random.default_rng(0))
        assert origins.min() >= 55

    def test_no_usable_history(self, small_builder):
        with pytest.raises(ValueError, match="no article"):
            SampleDrawer(small_builder, [0], 0, TrainConfig())

    def test_market_shares(self, small_builder):
        mw = market_shares(small_builder, cutoff=50)
        d = np.nansum(small_builder.imputed.demand[:, :, :51], axis=(0, 2))
        np.testing.assert_allclose(mw, d / d.sum())


@pytest.fixture(scope="module")
def trained(small_builder, small_schema):
    model = small_model(small_schema)
    result = train(small_builder, model, TrainConfig(**FAST), cutoff=55, keep_snapshots=True)
    return result


class TestTrain:
    """End-to-end loop on the small catalog."""

    def test_far_frozen_during_phase_one(self, trained):
        s = trained.snapshots
        for k in group_names(trained.model.params, "far."):
            np.testing.assert_array_equal(s["after_near"][k], s["start"][k], err_msg=k)

    def test_near_side_frozen_during_phase_two(self, trained):
        s = trained.snapshots
        far = group_names(trained.model.params, "far.")
        for k in set(trained.model.params) - far:
            np.testing.assert_array_equal(s["after_far"][k], s["after_near"][k], err_msg=k)

    def test_both_phases_learn(self, trained):
        s = trained.snapshots
        assert not np.array_equal(s["after_near"]["enc.0.attn.q.w"], s["start"]["enc.0.attn.q.w"])
        assert not np.array_equal(s["after_far"]["far.phi0.h.w"], s["after_near"]["far.phi0.h.w"])

    def test_loss_decreases(self, trained):
        assert trained.phase1_loss < trained.initial_loss

    def test_trace(self, trained, tmp_path):
        assert [p for _, p, _ in trained.trace] == ["near", "near", "far"]
        trained.write_trace(tmp_path / "trace.csv")
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0] == "epoch,phase,loss" and len(lines) == 4

    def test_deterministic(self, small_builder, small_schema, trained):
        again = train(small_builder, small_model(small_schema), TrainConfig(**FAST), cutoff=55)
        for k, p in trained.model.params.items():
            np.testing.assert_array_equal(again.model.params[k].data, p.data)

    def test_checkpoints(self, small_builder, small_schema, tmp_path):
        train(small_builder, small_model(small_schema), TrainConfig(**FAST), cutoff=55, checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch000.npz", "epoch001.npz", "epoch002.npz"]
        DemandForecaster.load(tmp_path / "epoch002.npz")

    def test_non_monotone_trace_flagged(self, small_builder, small_schema, caplog):
        cfg = TrainConfig(**{**FAST, "near_epochs": 4, "learning_rate": 5e-2, "lr_schedule": "constant"})
        with caplog.at_level(logging.WARNING, logger="demandgrid.training"):
            res = train(small_builder, small_model(small_schema), cfg, cutoff=55)
        near = [v for _, p, v in res.trace if p == "near"]
        assert res.phase1_monotone == bool(np.all(np.diff(near) <= 0))
        assert ("not monotone" in caplog.text) == (not res.phase1_monotone)

    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_divergence_restores_last_epoch(self, small_builder, small_schema, monkeypatch, tmp_path):
        model = small_model(small_schema)
        calls = {"n": 0}
        real_step = T.Adam.step

        def poisoned(self, params, grads, frozen=()):
            real_step(self, params, grads, frozen)
            calls["n"] += 1
            if calls["n"] == 6:  # inside the second epoch; four steps per epoch
                params["enc.0.attn.q.w"].data = params["enc.0.attn.q.w"].data * np.nan

        monkeypatch.setattr(T.Adam, "step", poisoned)
        with pytest.raises(TrainingDiverged, match="near epoch 1.*epoch000.npz"):
            train(small_builder, model, TrainConfig(**FAST), cutoff=55, checkpoint_dir=tmp_path)
        saved = DemandForecaster.load(tmp_path / "epoch000.npz")
        for k, p in model.params.items():
            np.testing.assert_array_equal(p.data, saved.params[k].data, err_msg=k)
