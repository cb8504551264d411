import struct

import numpy as np
import pytest

from datransnet.gradcheck import check_gradients, probe
from datransnet.layers import Conv2d
from datransnet.network import (
    CheckpointError,
    ConfigError,
    NetworkConfig,
    build,
    checkpoint_bytes,
    forward,
    load_checkpoint,
    param_count,
    read_checkpoint,
    save_checkpoint,
)
from datransnet.tensor import DimensionError, Tensor

TINY = NetworkConfig(depth=2, base_channels=8, dilations=(1, 3))


class TestConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert cfg.dilations == (1, 3)
        assert cfg.heads == 2
        assert cfg.widths == [16, 32, 64, 128]

    @pytest.mark.parametrize(
        "kwargs, field",
        [
            (dict(depth=0), "depth"),
            (dict(base_channels=0), "base_channels"),
            (dict(dilations=()), "dilations"),
            (dict(dilations=(1, 0)), "dilations"),
            (dict(base_channels=6, dilations=(1, 2, 3, 4)), "base_channels"),
            (dict(base_channels=2, depth=1, se_ratio=4), "se_ratio"),
            (dict(border="reflect"), "border"),
        ],
    )
    def test_invalid_fields_named(self, kwargs, field):
        with pytest.raises(ConfigError) as exc:
            NetworkConfig(**kwargs)
        assert exc.value.field == field

    def test_baseline_skips_head_divisibility(self):
        NetworkConfig(base_channels=6, dilations=(1, 2, 3, 4), datrans=False)


class TestBuildAndForward:
    def test_shape_round_trip(self):
        net = build(TINY)
        x = np.random.default_rng(0).uniform(0, 1, size=(1, 64, 64))
        out = forward(net, Tensor(x)).data
        assert out.shape == (1, 64, 64)
        assert np.all((out > 0) & (out < 1))

    def test_batched_forward(self):
        net = build(TINY)
        x = np.random.default_rng(1).uniform(0, 1, size=(3, 1, 16, 16))
        batched = net(Tensor(x)).data
        assert batched.shape == (3, 1, 16, 16)
        np.testing.assert_allclose(batched[1], net(Tensor(x[1])).data, atol=1e-13)

    @pytest.mark.parametrize(
        "cfg",
        [
            NetworkConfig(depth=1, base_channels=4, dilations=(2,)),
            NetworkConfig(depth=3, base_channels=4, dilations=(1, 2, 3, 4), gfem_se=False),
            NetworkConfig(depth=2, base_channels=4, datrans=False, gfem_nonlocal=False, gfem_se=False),
            NetworkConfig(depth=2, base_channels=8, datrans_in_decoder=False, gfem_residual=False),
        ],
    )
    def test_variant_shapes(self, cfg):
        out = build(cfg)(Tensor(np.ones((1, 16, 24)))).data
        assert out.shape == (1, 16, 24)
        assert np.all(np.isfinite(out))

    def test_zero_input_is_finite(self):
        out = build(TINY)(Tensor(np.zeros((1, 16, 16)))).data
        assert np.all(np.isfinite(out)) and np.all((out > 0) & (out < 1))

    def test_indivisible_input_names_multiple(self):
        with pytest.raises(DimensionError, match="multiple of 4"):
            build(TINY)(Tensor(np.ones((1, 18, 16))))

    def test_wrong_channel_count(self):
        with pytest.raises(DimensionError):
            build(TINY)(Tensor(np.ones((2, 16, 16))))

    def test_same_seed_same_parameters(self):
        a, b = build(TINY), build(TINY)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_different_seed_different_parameters(self):
        a = build(TINY)
        b = build(NetworkConfig(depth=2, base_channels=8, seed=1))
        assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))

    def test_structure(self):
        net = build(TINY)
        assert len(net.stages) == len(net.upstages) == 2
        assert net.bottleneck is not None
        assert [h.dilation for h in net.stages[0].mix.heads] == [1, 3]
        assert isinstance(build(NetworkConfig(depth=2, base_channels=8, datrans=False)).stages[0].mix, Conv2d)

    def test_spot_check_gradients(self):
        net = build(TINY)
        x = Tensor(np.random.default_rng(2).uniform(0, 1, size=(1, 16, 16)))
        r = np.random.default_rng(3).uniform(-1, 1, size=(1, 16, 16))
        names, params = zip(*net.named_parameters())
        rng = np.random.default_rng(4)
        picks = [(int(i), int(rng.integers(params[i].size))) for i in rng.choice(len(params), 10, replace=False)]
        report = check_gradients(lambda: probe(net(x), r), params, names, indices=picks)
        assert report.checked == 10
        assert report.ok, report.failures


class TestParamCount:
    def test_single_conv(self):
        assert param_count(Conv2d(np.random.default_rng(0), 2, 3)) == 9

    def test_seed_invariant(self):
        assert param_count(build(TINY)) == param_count(build(NetworkConfig(depth=2, base_channels=8, seed=5)))

    def test_gfem_ordering(self):
        def count(nl, se):
            return param_count(build(NetworkConfig(depth=2, base_channels=8, gfem_nonlocal=nl, gfem_se=se)))

        none, nl, se, both = count(False, False), count(True, False), count(False, True), count(True, True)
        assert none < nl < both
        assert none < se < both

    def test_components_ordering(self):
        def count(datrans, gfem):
            cfg = NetworkConfig(depth=2, base_channels=8, datrans=datrans, gfem_nonlocal=gfem, gfem_se=gfem)
            return param_count(build(cfg))

        base, dat, gf, both = count(False, False), count(True, False), count(False, True), count(True, True)
        assert base < dat < both
        assert base < gf < both


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = build(TINY)
        save_checkpoint(net, tmp_path / "a.datn")
        other = build(NetworkConfig(depth=2, base_channels=8, seed=9))
        load_checkpoint(other, tmp_path / "a.datn")
        for p, q in zip(net.parameters(), other.parameters()):
            np.testing.assert_array_equal(q.data, p.data.astype(np.float32))

    def test_layout(self):
        net = Conv2d(np.random.default_rng(0), 1, 2)
        blob = checkpoint_bytes(net)
        assert blob[:4] == b"DATN"
        assert struct.unpack("<II", blob[4:12]) == (1, 2)
        (name_len,) = struct.unpack("<I", blob[12:16])
        assert blob[16 : 16 + name_len] == b"weight"
        pos = 16 + name_len
        (rank,) = struct.unpack("<I", blob[pos : pos + 4])
        assert rank == 4
        assert struct.unpack("<4Q", blob[pos + 4 : pos + 36]) == (2, 1, 1, 1)
        payload = np.frombuffer(blob[pos + 36 : pos + 44], dtype="<f4")
        np.testing.assert_array_equal(payload, net.weight.data.ravel().astype(np.float32))
        assert len(blob) == pos + 44 + 4 + 4 + 4 + 8 + 8

    def test_deterministic_bytes(self):
        assert checkpoint_bytes(build(TINY)) == checkpoint_bytes(build(TINY))

    def test_shape_mismatch_names_tensor(self, tmp_path):
        save_checkpoint(build(TINY), tmp_path / "a.datn")
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(build(NetworkConfig(depth=2, base_channels=16)), tmp_path / "a.datn")
        assert exc.value.tensor == "stages.0.conv_in.weight"

    def test_missing_and_extra_tensors(self, tmp_path):
        save_checkpoint(build(TINY), tmp_path / "a.datn")
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(build(NetworkConfig(depth=2, base_channels=8, gfem_se=False)), tmp_path / "a.datn")
        assert exc.value.tensor is not None
        save_checkpoint(build(NetworkConfig(depth=2, base_channels=8, gfem_se=False)), tmp_path / "b.datn")
        with pytest.raises(CheckpointError, match="lacks"):
            load_checkpoint(build(TINY), tmp_path / "b.datn")

    @pytest.mark.parametrize("cut", [0, 3, 10, 30, -1])
    def test_truncated(self, cut):
        blob = checkpoint_bytes(Conv2d(np.random.default_rng(0), 2, 2))
        with pytest.raises(CheckpointError):
            read_checkpoint(blob[:cut])

    def test_bad_magic_and_trailing_bytes(self):
        blob = checkpoint_bytes(Conv2d(np.random.default_rng(0), 2, 2))
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(b"NOPE" + blob[4:])
        with pytest.raises(CheckpointError, match="trailing"):
            read_checkpoint(blob + b"\0")
