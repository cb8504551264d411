import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datransnet import tensor as T
from datransnet.edgecdc import (
    EdgeKernelBank,
    StaticCdcWeights,
    apply_static_cdc,
    cdc_direct,
    diff,
    flatten_tokens,
    neighbor_offsets,
)
from datransnet.tensor import DimensionError, Tensor


def pipeline(image, m, dilation, border="zero"):
    h, w = image.shape[-2:]
    tokens = flatten_tokens(diff(Tensor(image), EdgeKernelBank(dilation, border)))
    return apply_static_cdc(StaticCdcWeights(m), tokens, h, w).data


class TestKernelBank:
    @pytest.mark.parametrize("n", [1, 2, 3, 5])
    def test_offsets_enumerate_dilated_ring(self, n):
        assert neighbor_offsets(n) == [
            (-n, -n), (-n, 0), (-n, n), (0, -n), (0, n), (n, -n), (n, 0), (n, n)
        ]

    @pytest.mark.parametrize("n", [1, 3])
    def test_kernels_are_differences(self, n):
        k = EdgeKernelBank(n).kernels
        assert k.shape == (8, 2 * n + 1, 2 * n + 1)
        for kj in k:
            assert kj.sum() == 0
            assert np.count_nonzero(kj) == 2
            assert sorted(kj[kj != 0]) == [-1.0, 1.0]
            assert kj[n, n] == -1.0

    def test_invalid_dilation(self):
        with pytest.raises(ValueError):
            EdgeKernelBank(0)


class TestDiff:
    def test_constant_image_center_border(self):
        out = diff(Tensor(np.full((2, 7, 7), 3.5)), EdgeKernelBank(2, "center")).data
        np.testing.assert_array_equal(out, 0.0)

    def test_constant_image_zero_border_interior(self):
        n = 2
        out = diff(Tensor(np.full((2, 9, 9), 3.5)), EdgeKernelBank(n)).data
        np.testing.assert_array_equal(out[:, n:-n, n:-n], 0.0)

    def test_one_hot_center(self):
        x = np.zeros((1, 3, 3))
        x[0, 1, 1] = 1.0
        out = diff(Tensor(x), EdgeKernelBank(1)).data
        for j, (dy, dx) in enumerate(neighbor_offsets(1)):
            assert out[j, 1, 1] == -1.0
            # the pixel whose neighbour j is the hot pixel
            assert out[j, 1 - dy, 1 - dx] == 1.0
            assert np.count_nonzero(out[j]) == 2

    def test_matches_conv2d_with_explicit_kernels(self):
        x = np.random.default_rng(0).normal(size=(2, 8, 8))
        bank = EdgeKernelBank(3)
        ref = T.conv2d(Tensor(x), Tensor(bank.conv_weight(2)), padding=3).data
        np.testing.assert_allclose(diff(Tensor(x), bank).data, ref, atol=1e-14)

    @given(st.floats(-5, 5), st.integers(1, 3))
    @settings(max_examples=30, deadline=None)
    def test_constant_shift_invariance(self, c, n):
        x = np.random.default_rng(n).normal(size=(2, 8, 8))
        bank = EdgeKernelBank(n, "center")
        a = diff(Tensor(x), bank).data
        b = diff(Tensor(x + c), bank).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_constant_shift_zero_border_interior(self):
        x = np.random.default_rng(1).normal(size=(1, 10, 10))
        bank = EdgeKernelBank(2)
        a, b = diff(Tensor(x), bank).data, diff(Tensor(x + 4.0), bank).data
        np.testing.assert_allclose(a[:, 2:-2, 2:-2], b[:, 2:-2, 2:-2], atol=1e-12)


class TestFlatten:
    def test_row_major(self):
        d = np.arange(32.0).reshape(8, 2, 2)
        out = flatten_tokens(Tensor(d)).data
        assert out.shape == (8, 4)
        np.testing.assert_array_equal(out[:, 0], d[:, 0, 0])
        np.testing.assert_array_equal(out[:, 1], d[:, 0, 1])
        np.testing.assert_array_equal(out[:, 2], d[:, 1, 0])
        np.testing.assert_array_equal(out[:, 3], d[:, 1, 1])

    def test_round_trip(self):
        d = np.random.default_rng(0).normal(size=(16, 3, 5))
        back = T.reshape(flatten_tokens(Tensor(d)), (16, 3, 5)).data
        np.testing.assert_array_equal(back, d)

    def test_column_is_per_pixel_differences(self):
        x = np.random.default_rng(1).normal(size=(2, 5, 6))
        n = 2
        tok = flatten_tokens(diff(Tensor(x), EdgeKernelBank(n))).data
        xp = np.pad(x, ((0, 0), (n, n), (n, n)))
        for y, z in [(0, 0), (2, 3), (4, 5)]:
            col = tok[:, y * 6 + z]
            expect = [
                xp[i, n + y + dy, n + z + dx] - x[i, y, z]
                for i in range(2)
                for dy, dx in neighbor_offsets(n)
            ]
            np.testing.assert_allclose(col, expect, atol=1e-14)


class TestStaticCdc:
    def test_identity_weights(self):
        x = np.random.default_rng(0).normal(size=(2, 4, 5))
        tokens = flatten_tokens(diff(Tensor(x), EdgeKernelBank(1)))
        out = apply_static_cdc(StaticCdcWeights(np.eye(16)), tokens, 4, 5).data
        np.testing.assert_array_equal(out, tokens.data.reshape(16, 4, 5))

    def test_zero_weights(self):
        x = np.random.default_rng(1).normal(size=(1, 4, 4))
        out = pipeline(x, np.zeros((3, 8)), 1)
        np.testing.assert_array_equal(out, 0.0)

    def test_weight_shape_checked(self):
        with pytest.raises(DimensionError):
            StaticCdcWeights(np.ones((2, 7)))
        tokens = flatten_tokens(diff(Tensor(np.ones((1, 3, 3))), EdgeKernelBank(1)))
        with pytest.raises(DimensionError):
            apply_static_cdc(StaticCdcWeights(np.ones((2, 16))), tokens, 3, 3)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            StaticCdcWeights(np.full((1, 8), np.nan))

    def test_direct_on_constant_image(self):
        w = StaticCdcWeights(np.random.default_rng(2).normal(size=(3, 16)))
        out = cdc_direct(np.full((2, 6, 6), 2.0), w, 1, border="center").data
        np.testing.assert_array_equal(out, 0.0)

    def test_direct_right_direction_on_ramp(self):
        n = 1
        ramp = np.arange(16.0).reshape(1, 4, 4) ** 1.5
        m = np.zeros((1, 8))
        m[0, 4] = 1.0  # direction 4 is (0, +n)
        out = cdc_direct(ramp, StaticCdcWeights(m), n).data[0]
        np.testing.assert_allclose(out[:, :-n], ramp[0, :, n:] - ramp[0, :, :-n])
        np.testing.assert_allclose(out[:, -n:], -ramp[0, :, -n:])  # zero-padded neighbour

    @pytest.mark.parametrize("n", [1, 2, 3, 5])
    @pytest.mark.parametrize("border", ["zero", "center"])
    def test_pipeline_equals_direct(self, n, border):
        rng = np.random.default_rng(n)
        x = rng.normal(size=(3, 9, 7))
        m = rng.normal(size=(4, 24))
        ref = cdc_direct(x, StaticCdcWeights(m), n, border).data
        assert np.max(np.abs(pipeline(x, m, n, border) - ref)) < 1e-10

    def test_batched_tokens(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 1, 4, 4))
        m = rng.normal(size=(2, 8))
        tokens = flatten_tokens(diff(Tensor(x), EdgeKernelBank(1)))
        out = apply_static_cdc(StaticCdcWeights(m), tokens, 4, 4).data
        for i in range(2):
            np.testing.assert_allclose(out[i], cdc_direct(x[i], StaticCdcWeights(m), 1).data, atol=1e-12)
