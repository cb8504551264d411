import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from datransnet import tensor as T
from datransnet.data import SyntheticSceneSpec, synthesize
from datransnet.gradcheck import check_gradients
from datransnet.layers import Parameter
from datransnet.network import ConfigError, NetworkConfig, build, checkpoint_bytes
from datransnet.tensor import DimensionError, Tensor
from datransnet.training import (
    LOG_HEADER,
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    fit,
    lr_at,
    read_log,
    soft_iou_loss,
)

TINY = NetworkConfig(depth=2, base_channels=8, dilations=(1, 3))


class TestSoftIoU:
    def test_perfect_match(self):
        g = (np.random.default_rng(0).uniform(size=(1, 8, 8)) > 0.5).astype(float)
        assert soft_iou_loss(Tensor(g), g).item() == pytest.approx(0.0, abs=1e-12)

    def test_all_ones_against_half_mask(self):
        g = np.zeros((1, 8, 8))
        g[:, :4] = 1.0
        assert abs(soft_iou_loss(Tensor(np.ones((1, 8, 8))), g).item() - 0.5) < 1e-6

    def test_empty_prediction_of_empty_mask(self):
        assert soft_iou_loss(Tensor(np.zeros((1, 4, 4))), np.zeros((1, 4, 4))).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            soft_iou_loss(Tensor(np.ones((1, 4, 4))), np.ones((1, 4, 5)))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        p = Tensor(rng.uniform(0.05, 0.95, size=(6, 6)), requires_grad=True)
        g = (rng.uniform(size=(6, 6)) > 0.6).astype(float)
        report = check_gradients(lambda: soft_iou_loss(p, g), [p], tol=1e-6)
        assert report.ok, report.failures[:3]

    @given(
        arrays(np.float64, (5, 5), elements=st.floats(0.001, 0.999)),
        arrays(np.bool_, (5, 5)),
    )
    @settings(max_examples=60, deadline=None)
    def test_range_and_monotone_on_targets(self, p, g):
        g = g.astype(float)
        loss = soft_iou_loss(Tensor(p), g).item()
        assert 0.0 <= loss <= 1.0
        if g.any():
            q = p.copy()
            i = np.flatnonzero(g)[0]
            q.flat[i] = min(1.0, q.flat[i] + 0.1)
            assert soft_iou_loss(Tensor(q), g).item() <= loss + 1e-15


class TestSchedule:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.epochs, cfg.lr0) == (4, 400, 5e-4)

    @pytest.mark.parametrize("epoch, lr", [(0, 5e-4), (199, 5e-4), (200, 5e-5), (299, 5e-5), (300, 5e-6), (399, 5e-6)])
    def test_values(self, epoch, lr):
        assert lr_at(TrainConfig(), epoch) == lr

    def test_non_increasing(self):
        cfg = TrainConfig()
        lrs = [lr_at(cfg, e) for e in range(cfg.epochs)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(TrainConfig(), 400)
        with pytest.raises(ValueError):
            lr_at(TrainConfig(), -1)

    def test_short_runs_keep_initial_rate(self):
        cfg = TrainConfig(epochs=5)
        assert [lr_at(cfg, e) for e in range(5)] == [5e-4] * 5

    @pytest.mark.parametrize(
        "kwargs",
        [dict(epochs=0), dict(batch_size=0), dict(lr0=0.0), dict(drop1_epoch=300, drop2_epoch=200), dict(threshold=1.0)],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Parameter(np.array([1.0, -2.0]))
        state = AdamState([p], ["p"])
        p.grad = np.zeros(2)
        adam_step(state, 1e-3)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.t == 1

    def test_first_step_is_minus_lr(self):
        p = Parameter(np.array([0.3]))
        state = AdamState([p], ["p"])
        p.grad = np.array([1.0])
        adam_step(state, 5e-4)
        assert abs((p.data[0] - 0.3) + 5e-4) < 1e-9

    def test_matches_reference_update(self):
        rng = np.random.default_rng(0)
        p = Parameter(rng.normal(size=3))
        ref = p.data.copy()
        m = v = np.zeros(3)
        state = AdamState([p], ["p"])
        for t in range(1, 6):
            g = rng.normal(size=3)
            p.grad = g.copy()
            adam_step(state, 1e-2)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-13)

    def test_non_finite_gradient_names_parameter(self):
        p = Parameter(np.zeros(2))
        state = AdamState([p], ["stages.0.weight"])
        p.grad = np.array([0.0, np.nan])
        with pytest.raises(TrainingDiverged, match="stages.0.weight"):
            adam_step(state, 1e-3)

    def test_determinism(self):
        def run():
            net = build(TINY)
            state = AdamState.for_module(net)
            x = Tensor(np.random.default_rng(1).uniform(size=(2, 1, 16, 16)))
            g = (np.random.default_rng(2).uniform(size=(2, 1, 16, 16)) > 0.9).astype(float)
            for _ in range(5):
                net.zero_grad()
                soft_iou_loss(net(x), g).backward()
                adam_step(state, 5e-4)
            return checkpoint_bytes(net)

        assert run() == run()


@pytest.fixture(scope="module")
def scenes():
    spec = SyntheticSceneSpec(height=16, width=16, target_sigma=(0.7, 1.5), clutter_sigma=(2.0, 3.0))
    return synthesize(spec, 6, "s")


class TestFit:
    def test_one_epoch(self, scenes, tmp_path):
        net = build(NetworkConfig(depth=2, base_channels=4))
        res = fit(net, scenes[:4], scenes[4:], TrainConfig(epochs=1), tmp_path)
        assert len(res.log) == 1 and np.isfinite(res.log[0].loss)
        assert (tmp_path / "best.datn").exists() and (tmp_path / "final.datn").exists()
        header = (tmp_path / "train_log.csv").read_text().splitlines()[0]
        assert tuple(header.split(",")) == LOG_HEADER
        assert read_log(tmp_path / "train_log.csv") == res.log

    def test_descent_on_fixed_batch(self):
        net = build(NetworkConfig(depth=2, base_channels=4))
        spec = SyntheticSceneSpec(height=16, width=16, n_targets=(1, 1), target_sigma=(1.0, 1.5), clutter_blobs=(0, 0))
        batch = synthesize(spec, 4, "b")
        x = Tensor(np.stack([s.image for s in batch]))
        g = np.stack([s.mask for s in batch])
        state = AdamState.for_module(net)
        losses = []
        for _ in range(20):
            net.zero_grad()
            loss = soft_iou_loss(net(x), g)
            losses.append(loss.item())
            loss.backward()
            adam_step(state, 5e-4)
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_rejects_empty_sets(self, scenes):
        with pytest.raises(ValueError):
            fit(build(NetworkConfig(depth=1, base_channels=2, se_ratio=2)), [], scenes, TrainConfig(epochs=1))

    def test_diverged_loss(self, scenes):
        net = build(NetworkConfig(depth=2, base_channels=4))
        net.head.bias.data[...] = np.nan
        with pytest.raises(TrainingDiverged):
            fit(net, scenes[:4], scenes[4:], TrainConfig(epochs=1))

    def test_stop_at_miou(self, scenes):
        net = build(NetworkConfig(depth=2, base_channels=4))
        res = fit(net, scenes[:4], scenes[4:], TrainConfig(epochs=3), stop_at_miou=0.0)
        assert len(res.log) == 1

    def test_reproducible(self, scenes, tmp_path):
        for run in ("a", "b"):
            fit(build(NetworkConfig(depth=2, base_channels=4)), scenes[:4], scenes[4:], TrainConfig(epochs=2), tmp_path / run)
        for name in ("train_log.csv", "best.datn", "final.datn"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
