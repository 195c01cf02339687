import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gfkd import ops
from gfkd.gradcheck import finite_diff_check
from gfkd.tensor import Tensor

SEEDS = range(20)


def naive_conv(x, w, b, stride, pad):
    """Direct loop cross-correlation used as an oracle."""
    bs, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((bs, o, ho, wo))
    for n in range(bs):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, oc, i, j] = (patch * w[oc]).sum() + b[oc]
    return out


def zero_stuffed_transposed(x, w, b, stride, pad):
    """Transposed conv as a stride-1 conv over the zero-stuffed, re-padded input."""
    bs, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    stuffed = np.zeros((bs, cin, (h - 1) * stride + 1, (wd - 1) * stride + 1))
    stuffed[:, :, ::stride, ::stride] = x
    flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    q = k - 1 - pad
    return naive_conv(np.pad(stuffed, ((0, 0), (0, 0), (q, q), (q, q))), flipped, b, 1, 0)


class TestConv2d:
    def test_all_ones_filter(self):
        out = ops.conv2d(Tensor([[[[1, 2], [3, 4]]]]), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, [[[[10.0]]]])

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 5))
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weights_give_bias(self, rng):
        out = ops.conv2d(Tensor(rng.normal(size=(1, 3, 6, 6))), Tensor(np.zeros((2, 3, 3, 3))), Tensor([1.5, -2.0]), 1, 1)
        assert np.all(out.data[:, 0] == 1.5) and np.all(out.data[:, 1] == -2.0)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor([0.0]))

    def test_kernel_larger_than_input_rejected(self):
        with pytest.raises(ValueError):
            ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), Tensor([0.0]))

    def test_bad_stride_rejected(self):
        with pytest.raises(ValueError):
            ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), Tensor([0.0]), stride=0)

    @pytest.mark.parametrize("stride,pad,size", [(1, 0, 5), (1, 1, 6), (2, 1, 7), (2, 0, 8), (3, 2, 9)])
    def test_matches_loop_oracle(self, rng, stride, pad, size):
        x = rng.normal(size=(2, 3, size, size))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        assert out.shape[2] == (size + 2 * pad - 3) // stride + 1
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, pad), atol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        r = np.random.default_rng(seed)
        stride, pad = [(1, 1), (2, 1), (1, 0), (2, 0)][seed % 4]
        params = [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)]
        probe = r.normal(size=ops.conv2d(*(Tensor(p) for p in params), stride, pad).shape)
        err = finite_diff_check(lambda t: ops.sum(ops.mul(ops.conv2d(t[0], t[1], t[2], stride, pad), Tensor(probe))), params)
        assert err < 1e-6


class TestConvTransposed:
    def test_size_preserving_geometry(self, rng):
        out = ops.conv2d_transposed(Tensor(rng.normal(size=(1, 2, 16, 16))), Tensor(rng.normal(size=(2, 3, 3, 3))), Tensor(np.zeros(3)), 1, 1)
        assert out.shape == (1, 3, 16, 16)

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        out = ops.conv2d_transposed(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ops.conv2d_transposed(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 1, 3, 3))), Tensor([0.0]))

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_equals_zero_stuffing_oracle(self, seed, stride, pad):
        r = np.random.default_rng(seed)
        x, w, b = r.normal(size=(2, 2, 4, 4)), r.normal(size=(2, 3, 3, 3)), r.normal(size=3)
        out = ops.conv2d_transposed(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        assert out.shape[2] == (4 - 1) * stride - 2 * pad + 3
        np.testing.assert_allclose(out.data, zero_stuffed_transposed(x, w, b, stride, pad), atol=1e-10)

    def test_is_adjoint_of_conv(self, rng):
        x = rng.normal(size=(2, 3, 7, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        y = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(4)), 2, 1).data
        g = rng.normal(size=y.shape)
        back = ops.conv2d_transposed(Tensor(g), Tensor(w), Tensor(np.zeros(3)), 2, 1).data
        # <conv(x), g> == <x, conv^T(g)> whenever the geometry is exact
        assert back.shape == x.shape
        assert (y * g).sum() == pytest.approx((x * back).sum(), rel=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        r = np.random.default_rng(100 + seed)
        stride, pad = [(1, 1), (2, 1), (1, 0), (2, 0)][seed % 4]
        params = [r.normal(size=(2, 2, 4, 4)), r.normal(size=(2, 3, 3, 3)), r.normal(size=3)]
        probe = r.normal(size=ops.conv2d_transposed(*(Tensor(p) for p in params), stride, pad).shape)
        err = finite_diff_check(
            lambda t: ops.sum(ops.mul(ops.conv2d_transposed(t[0], t[1], t[2], stride, pad), Tensor(probe))), params
        )
        assert err < 1e-6


def away_from_zero(r, shape, gap=1e-2):
    x = r.normal(size=shape)
    return np.where(np.abs(x) < gap, gap * np.sign(x + 1e-300) + x, x)


class TestActivations:
    def test_leaky_negative(self):
        assert ops.leaky_relu(Tensor(-1.0), 0.2).item() == pytest.approx(-0.2)

    def test_leaky_positive_passthrough(self):
        np.testing.assert_array_equal(ops.leaky_relu(Tensor([0.0, 2.5])).data, [0.0, 2.5])

    def test_relu(self):
        assert ops.relu(Tensor(-5.0)).item() == 0.0

    @pytest.mark.parametrize("slope", [0.0, 1.0, -0.1, 1.5])
    def test_slope_outside_open_interval_rejected(self, slope):
        with pytest.raises(ValueError):
            ops.leaky_relu(Tensor([1.0]), slope)

    def test_dispatch(self):
        assert ops.activation("relu", Tensor(-1.0)).item() == 0.0
        assert ops.activation("leaky_relu", Tensor(-1.0), slope=0.5).item() == -0.5
        with pytest.raises(ValueError):
            ops.activation("tanh", Tensor(1.0))

    @given(arrays(np.float64, (6,), elements=st.floats(-100, 100, allow_nan=False)))
    def test_leaky_is_max_of_x_and_scaled_x(self, x):
        np.testing.assert_array_equal(ops.leaky_relu(Tensor(x), 0.2).data, np.maximum(x, 0.2 * x))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        r = np.random.default_rng(200 + seed)
        x = away_from_zero(r, (3, 4))
        probe = r.normal(size=(3, 4))
        assert finite_diff_check(lambda t: ops.sum(ops.mul(ops.relu(t[0]), Tensor(probe))), [x]) < 1e-6
        assert finite_diff_check(lambda t: ops.sum(ops.mul(ops.leaky_relu(t[0]), Tensor(probe))), [x]) < 1e-6


class TestShapeOps:
    def test_max_pool(self):
        np.testing.assert_array_equal(ops.max_pool2(Tensor([[[[1, 2], [3, 4]]]])).data, [[[[4]]]])

    def test_max_pool_tie_goes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        from gfkd.tensor import backward

        g = backward(ops.sum(ops.max_pool2(x)))[x]
        np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])

    def test_odd_pool_rejected(self):
        with pytest.raises(ValueError):
            ops.max_pool2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_upsample(self):
        np.testing.assert_array_equal(ops.upsample_nearest2(Tensor([[[[7.0]]]])).data, [[[[7, 7], [7, 7]]]])

    def test_concat_shape_and_order(self, rng):
        a, b = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 3, 3))
        out = ops.concat_channels(Tensor(a), Tensor(b))
        assert out.shape == (2, 5, 3, 3)
        np.testing.assert_array_equal(out.data[:, :2], a)
        np.testing.assert_array_equal(out.data[:, 2:], b)

    def test_concat_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ops.concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))

    def test_dispatch(self):
        assert ops.shape_op("upsample_nearest2", Tensor(np.zeros((1, 1, 2, 2)))).shape == (1, 1, 4, 4)
        with pytest.raises(ValueError):
            ops.shape_op("flatten", Tensor(np.zeros((1, 1, 2, 2))))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        r = np.random.default_rng(300 + seed)
        # distinct values keep the pooling argmax stable under +-h
        x = r.permutation(16).reshape(1, 1, 4, 4) * 0.1 + r.normal(size=(1, 1, 4, 4)) * 1e-3
        y = r.normal(size=(1, 2, 4, 4))
        probe_pool = r.normal(size=(1, 1, 2, 2))
        probe_up = r.normal(size=(1, 2, 8, 8))
        probe_cat = r.normal(size=(1, 3, 4, 4))
        assert finite_diff_check(lambda t: ops.sum(ops.mul(ops.max_pool2(t[0]), Tensor(probe_pool))), [x]) < 1e-6
        assert finite_diff_check(lambda t: ops.sum(ops.mul(ops.upsample_nearest2(t[0]), Tensor(probe_up))), [y]) < 1e-6
        assert finite_diff_check(
            lambda t: ops.sum(ops.mul(ops.concat_channels(t[0], t[1]), Tensor(probe_cat))), [x, y]
        ) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ops.softmax_over_classes(Tensor(np.zeros((1, 2, 1, 1)))).data.ravel(), [0.5, 0.5])

    def test_closed_form(self):
        z = ops.softmax_over_classes(Tensor(np.array([math.log(3), 0.0]).reshape(1, 2, 1, 1)), 1.0)
        np.testing.assert_allclose(z.data.ravel(), [0.75, 0.25], rtol=1e-15)

    def test_nonpositive_tau_rejected(self):
        with pytest.raises(ValueError):
            ops.softmax_over_classes(Tensor(np.zeros((1, 2, 1, 1))), 0.0)

    def test_stable_for_huge_logits(self):
        z = ops.softmax_over_classes(Tensor(np.array([1000.0, 999.0]).reshape(1, 2, 1, 1)))
        assert np.all(np.isfinite(z.data))

    # logit gaps / tau stay below ~36 so no probability rounds to exactly 0 or 1
    @given(arrays(np.float64, (2, 4, 3, 3), elements=st.floats(-8, 8, allow_nan=False)), st.sampled_from([0.5, 1.0, 4.0]))
    def test_rows_are_distributions(self, logits, tau):
        z = ops.softmax_over_classes(Tensor(logits), tau).data
        assert np.abs(z.sum(axis=1) - 1).max() <= 1e-12
        assert np.all((z > 0) & (z < 1))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        r = np.random.default_rng(400 + seed)
        probe = r.normal(size=(2, 3, 2, 2))
        tau = [1.0, 0.5, 2.0][seed % 3]
        err = finite_diff_check(
            lambda t: ops.sum(ops.mul(ops.softmax_over_classes(t[0], tau), Tensor(probe))), [r.normal(size=(2, 3, 2, 2))]
        )
        assert err < 1e-6


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = ops.cross_entropy(Tensor(np.zeros((1, 4, 2, 2))), np.zeros((1, 2, 2), dtype=int))
        assert loss.item() == pytest.approx(math.log(4))

    def test_only_labeled_samples_count(self, rng):
        logits = rng.normal(size=(2, 3, 2, 2))
        labels = rng.integers(0, 3, size=(2, 2, 2))
        both = ops.cross_entropy(Tensor(logits[:1]), labels[:1]).item()
        masked = ops.cross_entropy(Tensor(logits), labels, np.array([True, False])).item()
        assert masked == pytest.approx(both, rel=1e-14)

    def test_no_labeled_sample_gives_constant_zero(self, rng):
        loss = ops.cross_entropy(Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True), np.zeros((2, 2, 2), dtype=int), [False, False])
        assert loss.item() == 0.0 and not loss.requires_grad

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            ops.cross_entropy(Tensor(np.zeros((1, 2, 1, 1))), np.full((1, 1, 1), 2))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        r = np.random.default_rng(500 + seed)
        labels = r.integers(0, 4, size=(3, 3, 3))
        flags = np.array([True, seed % 2 == 0, True])
        err = finite_diff_check(lambda t: ops.cross_entropy(t[0], labels, flags), [r.normal(size=(3, 4, 3, 3))])
        assert err < 1e-6


class TestPairwiseDistance:
    def test_hand_case(self):
        rows = np.zeros((1, 2, 9))
        rows[0, 0, 0], rows[0, 1, 8] = 5.0, 4.0
        d = ops.pairwise_distance(Tensor(rows)).data[0]
        assert d[0, 1] == pytest.approx(math.sqrt(41))
        assert d[0, 0] == 0.0 and d[1, 1] == 0.0

    def test_coincident_rows_have_zero_subgradient(self):
        x = Tensor(np.ones((1, 2, 3)), requires_grad=True)
        from gfkd.tensor import backward

        g = backward(ops.sum(ops.pairwise_distance(x)))[x]
        np.testing.assert_array_equal(g, 0.0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        r = np.random.default_rng(600 + seed)
        probe = r.normal(size=(2, 4, 4))
        err = finite_diff_check(lambda t: ops.sum(ops.mul(ops.pairwise_distance(t[0]), Tensor(probe))), [r.normal(size=(2, 4, 5))])
        assert err < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_and_reduce_gradcheck(seed):
    r = np.random.default_rng(700 + seed)
    a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))

    def f(t):
        x = ops.add(ops.mul(t[0], t[1]), ops.square(ops.sub(t[0], ops.scale(t[1], 0.3))))
        x = ops.reshape(x, (4, 3))
        return ops.add(ops.sum(ops.mean(x, axes=0)), ops.sum(ops.sq_norm(x, axes=1, keepdims=True)))

    assert finite_diff_check(f, [a, b]) < 1e-6


def test_mac_counter(rng):
    with ops.count_macs() as box:
        ops.conv2d(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))), Tensor(np.zeros(4)), 1, 1)
    assert box[0] == 4 * 64 * 18
