import math

import numpy as np
import pytest

from docfuse.errors import ConfigError, DataError, DimensionError, FormatError
from docfuse.nn import (
    BatchNorm, Conv1d, Conv2d, Dense, DepthwiseConv2d, Dropout, GlobalAvgPool2d,
    MaxOverTime, MaxPool1d, PointwiseConv2d, ReLU, Sequential, SgdMomentum,
    checkpoint, he_init, make_rng, numerical_gradient, relative_error,
)
from docfuse.nn import functional as F


# -- brute-force oracles, written loop by loop and independent of the kernels --

def naive_matmul(x, w, b):
    B, I = x.shape
    O = w.shape[1]
    out = np.zeros((B, O))
    for bi in range(B):
        for o in range(O):
            s = b[o]
            for i in range(I):
                s += x[bi, i] * w[i, o]
            out[bi, o] = s
    return out


def naive_conv1d(x, w, b, pad_left, pad_right):
    B, C, T = x.shape
    O, _, K = w.shape
    xp = np.zeros((B, C, T + pad_left + pad_right))
    xp[:, :, pad_left:pad_left + T] = x
    t_out = xp.shape[2] - K + 1
    out = np.zeros((B, O, t_out))
    for bi in range(B):
        for o in range(O):
            for t in range(t_out):
                s = b[o]
                for c in range(C):
                    for k in range(K):
                        s += w[o, c, k] * xp[bi, c, t + k]
                out[bi, o, t] = s
    return out


def naive_conv2d(x, w, b, stride, pad_top, pad_left, h_out, w_out):
    B, C, H, W = x.shape
    O, _, KH, KW = w.shape
    out = np.zeros((B, O, h_out, w_out))
    for bi in range(B):
        for o in range(O):
            for i in range(h_out):
                for j in range(w_out):
                    s = b[o]
                    for c in range(C):
                        for ki in range(KH):
                            for kj in range(KW):
                                r, q = i * stride + ki - pad_top, j * stride + kj - pad_left
                                if 0 <= r < H and 0 <= q < W:
                                    s += w[o, c, ki, kj] * x[bi, c, r, q]
                    out[bi, o, i, j] = s
    return out


def naive_maxpool(x, window, stride):
    B, C, T = x.shape
    t_out = (T - window) // stride + 1
    out = np.zeros((B, C, t_out))
    for bi in range(B):
        for c in range(C):
            for t in range(t_out):
                out[bi, c, t] = max(x[bi, c, t * stride:t * stride + window])
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestDense:
    def test_identity(self):
        out, _ = F.dense_forward(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(out, [[1.0, 2.0]])

    def test_hand_case(self):
        out, _ = F.dense_forward(np.array([[1.0, 1.0]]), np.array([[2.0], [3.0]]), np.array([1.0]))
        np.testing.assert_array_equal(out, [[6.0]])

    def test_against_triple_loop(self, rng):
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        out, _ = F.dense_forward(x, w, b)
        np.testing.assert_allclose(out, naive_matmul(x, w, b), atol=1e-12)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
            F.dense_forward(np.zeros((1, 3)), np.zeros((2, 2)), np.zeros(2))


class TestConv1d:
    def test_valid_difference_kernel(self):
        x = np.array([[[1.0, 2.0, 3.0, 4.0]]])
        out, _ = F.conv1d_forward(x, np.array([[[1.0, -1.0]]]), np.zeros(1), padding="valid")
        np.testing.assert_array_equal(out, [[[-1.0, -1.0, -1.0]]])

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 7))
        out, _ = F.conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize("K", [4, 12, 3])
    def test_same_padding_against_loop(self, rng, K):
        T = 10 if K < 12 else 15
        x, w, b = rng.normal(size=(2, 3, T)), rng.normal(size=(5, 3, K)), rng.normal(size=5)
        out, _ = F.conv1d_forward(x, w, b)
        left, right, t_out = F.same_padding(T, K, 1)
        assert t_out == T
        np.testing.assert_allclose(out, naive_conv1d(x, w, b, left, right), atol=1e-12)

    def test_window_12_pads_5_before_6_after(self):
        assert F.same_padding(500, 12, 1) == (5, 6, 500)

    def test_empty_time_axis(self):
        with pytest.raises(DimensionError):
            F.conv1d_forward(np.zeros((1, 1, 0)), np.zeros((1, 1, 1)), np.zeros(1))


class TestPooling:
    def test_maxpool_hand(self):
        out, _ = F.maxpool1d_forward(np.array([[[1.0, 3.0, 2.0, 5.0]]]), 2, 2)
        np.testing.assert_array_equal(out, [[[3.0, 5.0]]])

    def test_maxpool_constant(self):
        out, _ = F.maxpool1d_forward(np.full((1, 2, 9), 4.0), 3, 2)
        assert np.all(out == 4.0)

    @pytest.mark.parametrize("window,stride", [(2, 2), (3, 2), (3, 1), (4, 3)])
    def test_maxpool_sliding_oracle(self, rng, window, stride):
        x = rng.normal(size=(2, 3, 11))
        out, _ = F.maxpool1d_forward(x, window, stride)
        np.testing.assert_array_equal(out, naive_maxpool(x, window, stride))

    def test_maxpool_too_short(self):
        with pytest.raises(DimensionError):
            F.maxpool1d_forward(np.zeros((1, 1, 1)), 2, 2)

    def test_maxpool_tie_goes_to_first(self):
        x = np.array([[[2.0, 2.0]]])
        out, cache = F.maxpool1d_forward(x, 2, 2)
        np.testing.assert_array_equal(F.maxpool1d_backward(np.ones_like(out), cache), [[[1.0, 0.0]]])

    def test_textcnn_length_chain(self):
        t = 500
        lengths = []
        for _ in range(4):
            t = (t - 2) // 2 + 1
            lengths.append(t)
        assert lengths == [250, 125, 62, 31]

    def test_max_over_time(self):
        out, _ = F.max_over_time_forward(np.array([[[1.0, 3.0], [2.0, 0.0]]]))
        np.testing.assert_array_equal(out, [[3.0, 2.0]])

    def test_max_over_time_single_step(self, rng):
        x = rng.normal(size=(2, 4, 1))
        out, _ = F.max_over_time_forward(x)
        np.testing.assert_array_equal(out, x[:, :, 0])

    def test_max_over_time_empty(self):
        with pytest.raises(DimensionError):
            F.max_over_time_forward(np.zeros((1, 2, 0)))

    def test_max_over_time_grad_is_one_hot(self, rng):
        x = rng.normal(size=(1, 2, 6))
        proj = rng.normal(size=(1, 2))
        out, cache = F.max_over_time_forward(x)
        g = F.max_over_time_backward(proj, cache)
        num = numerical_gradient(lambda: float((F.max_over_time_forward(x)[0] * proj).sum()), x)
        np.testing.assert_allclose(g, num, atol=1e-9)
        assert np.count_nonzero(g[0, 0]) == 1

    def test_gap_values(self):
        out, _ = F.global_avg_pool2d_forward(np.full((1, 1, 3, 3), 3.0))
        assert out[0, 0] == 3.0
        out, _ = F.global_avg_pool2d_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out[0, 0] == 2.5

    def test_gap_backward_uniform(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        proj = rng.normal(size=(2, 3))
        _, shape = F.global_avg_pool2d_forward(x)
        g = F.global_avg_pool2d_backward(proj, shape)
        np.testing.assert_allclose(g, np.broadcast_to(proj[:, :, None, None] / 20, x.shape))
        num = numerical_gradient(lambda: float((F.global_avg_pool2d_forward(x)[0] * proj).sum()), x)
        np.testing.assert_allclose(g, num, atol=1e-9)


class TestConv2d:
    def test_depthwise_ones_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out, _ = F.depthwise_conv2d_forward(x, np.ones((3, 1, 1)), np.zeros(3))
        np.testing.assert_array_equal(out, x)

    def test_pointwise_sums_channels(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        out, _ = F.pointwise_conv2d_forward(x, np.array([[1.0, 1.0]]), np.zeros(1))
        np.testing.assert_allclose(out[:, 0], x[:, 0] + x[:, 1])

    @pytest.mark.parametrize("stride,size", [(1, 5), (2, 5), (2, 6)])
    def test_conv2d_against_six_loop(self, rng, stride, size):
        x, w, b = rng.normal(size=(2, 2, size, size)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        out, _ = F.conv2d_forward(x, w, b, stride)
        top, _, h_out = F.same_padding(size, 3, stride)
        np.testing.assert_allclose(out, naive_conv2d(x, w, b, stride, top, top, h_out, h_out), atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_depthwise_against_loop(self, rng, stride):
        x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(2, 3, 3)), rng.normal(size=2)
        out, _ = F.depthwise_conv2d_forward(x, w, b, stride)
        full = np.zeros((2, 2, 3, 3))
        full[0, 0], full[1, 1] = w[0], w[1]
        top, _, h_out = F.same_padding(5, 3, stride)
        np.testing.assert_allclose(out, naive_conv2d(x, full, b, stride, top, top, h_out, h_out), atol=1e-12)

    def test_depthwise_never_mixes_channels(self, rng):
        x = rng.normal(size=(1, 3, 5, 5))
        out, _ = F.depthwise_conv2d_forward(x, rng.normal(size=(3, 3, 3)), np.zeros(3))
        x2 = x.copy()
        x2[:, 1] += 10.0
        out2, _ = F.depthwise_conv2d_forward(x2, _w := rng.normal(size=(3, 3, 3)), np.zeros(3))
        out3, _ = F.depthwise_conv2d_forward(x, _w, np.zeros(3))
        np.testing.assert_allclose(out2[:, [0, 2]], out3[:, [0, 2]])

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            F.depthwise_conv2d_forward(np.zeros((1, 2, 3, 3)), np.zeros((3, 3, 3)), np.zeros(3))
        with pytest.raises(DimensionError):
            F.pointwise_conv2d_forward(np.zeros((1, 2, 3, 3)), np.zeros((4, 3)), np.zeros(4))

    def test_stride2_ceil_semantics(self):
        assert F.same_padding(5, 3, 2) == (1, 1, 3)
        assert F.same_padding(6, 3, 2) == (0, 1, 3)


class TestElementwise:
    def test_relu(self):
        out, _ = F.relu_forward(np.array([-1.0, 2.0]))
        np.testing.assert_array_equal(out, [0.0, 2.0])

    def test_dropout_zero_rate_identity(self, rng):
        x = rng.normal(size=(4, 5))
        for training in (True, False):
            out, _ = F.dropout_forward(x, 0.0, training, make_rng(0))
            np.testing.assert_array_equal(out, x)

    def test_dropout_inference_identity_and_train_scaling(self, rng):
        x = np.ones((200, 50))
        np.testing.assert_array_equal(F.dropout_forward(x, 0.5, False, None)[0], x)
        out, _ = F.dropout_forward(x, 0.5, True, make_rng(0))
        assert set(np.unique(out)) == {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.05

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_dropout_bad_rate(self, rate):
        with pytest.raises(ConfigError):
            Dropout(rate)

    def test_batchnorm_bad_eps(self):
        with pytest.raises(ConfigError):
            BatchNorm(eps=0.0)

    @pytest.mark.parametrize("shape", [(16, 5), (8, 3, 7), (4, 3, 5, 5)])
    def test_batchnorm_training_moments(self, rng, shape):
        x = rng.normal(3.0, 2.5, size=shape)
        c = shape[1]
        out, _ = F.batchnorm_forward(x, np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), True)
        axes = (0,) + tuple(range(2, len(shape)))
        np.testing.assert_allclose(out.mean(axis=axes), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=axes), 1.0, atol=1e-5 * 2.5**-2 + 1e-6)

    def test_batchnorm_running_stats_only_in_training(self, rng):
        layer = BatchNorm()
        layer.build((3,), make_rng(0), np.float64)
        x = rng.normal(5.0, 1.0, size=(10, 3))
        layer.forward(x, training=False)
        np.testing.assert_array_equal(layer.buffers["running_mean"], 0.0)
        layer.forward(x, training=True)
        np.testing.assert_allclose(layer.buffers["running_mean"], 0.1 * x.mean(axis=0))


class TestLoss:
    def test_uniform_logits(self):
        loss, _ = F.softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
        assert loss == pytest.approx(math.log(4), abs=1e-15)

    def test_confident_logit(self):
        # scalar oracle: -log(e^10 / (e^10 + e^-10)) = log(1 + e^-20)
        expected = math.log1p(math.exp(-20.0))
        loss, _ = F.softmax_cross_entropy(np.array([[10.0, -10.0]]), np.array([0]))
        assert expected == pytest.approx(2.0611536e-9, rel=1e-7)
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_fd(self, rng):
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        _, g = F.softmax_cross_entropy(logits, labels)
        num = numerical_gradient(lambda: F.softmax_cross_entropy(logits, labels)[0], logits)
        assert relative_error(g, num) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            F.softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))

    def test_nonnegative(self, rng):
        for _ in range(20):
            loss, _ = F.softmax_cross_entropy(rng.normal(size=(4, 6)) * 10, rng.integers(0, 6, 4))
            assert loss >= 0


class TestOptimizer:
    def test_single_step(self):
        w = {"w": np.array([1.0])}
        opt = SgdMomentum(0.01, 0.9)
        opt.step(w, {"w": np.array([0.5])})
        assert opt.velocity["w"][0] == pytest.approx(-0.005)
        assert w["w"][0] == pytest.approx(0.995)

    def test_zero_grad_geometric_decay(self):
        w = {"w": np.array([1.0])}
        opt = SgdMomentum(0.01, 0.9)
        opt.step(w, {"w": np.array([1.0])})
        v0 = opt.velocity["w"][0]
        for k in range(1, 6):
            opt.step(w, {"w": np.array([0.0])})
            assert opt.velocity["w"][0] == pytest.approx(v0 * 0.9**k)

    def test_two_steps_recurrence(self):
        lr, m, g = 0.01, 0.9, 0.3
        v1 = -lr * g
        w1 = 2.0 + v1
        v2 = m * v1 - lr * g
        w2 = w1 + v2
        w = {"w": np.array([2.0])}
        opt = SgdMomentum(lr, m)
        opt.step(w, {"w": np.array([g])})
        opt.step(w, {"w": np.array([g])})
        assert w["w"][0] == pytest.approx(w2, abs=1e-15)


class TestHeInit:
    @pytest.mark.parametrize("fan_in,std", [(2, 1.0), (8, 0.5)])
    def test_std(self, fan_in, std):
        sample = he_init((100_000,), fan_in, make_rng(7))
        assert abs(sample.std() / std - 1) < 0.02

    def test_deterministic(self):
        np.testing.assert_array_equal(he_init((3, 4), 4, make_rng(3)), he_init((3, 4), 4, make_rng(3)))

    def test_bad_fan_in(self):
        with pytest.raises(ConfigError):
            he_init((2,), 0, make_rng(0))


class TestShapeAlgebra:
    def test_rejected_at_build(self):
        net = Sequential([Conv1d(4, 3), MaxOverTime(), MaxPool1d(2, 2)])
        with pytest.raises(DimensionError, match="layer 2"):
            net.build((2, 10))

    def test_shape_only_build_allocates_nothing(self):
        net = Sequential([Conv2d(8, 3, 2), GlobalAvgPool2d(), Dense(5)])
        assert net.build((3, 9, 9)) == (5,)
        assert net.shapes == [(3, 9, 9), (8, 5, 5), (8,), (5,)]
        assert list(net.named_params()) == []

    def test_params_have_matching_grads(self):
        net = Sequential([Dense(4), BatchNorm(), ReLU(), Dense(2)])
        net.build((3,), make_rng(0))
        for name, owner, key in net.named_params():
            assert owner.grads[key].shape == owner.params[key].shape, name


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, rng):
        tensors = [("a.w", rng.normal(size=(3, 4)).astype(np.float32)),
                   ("b", np.array([np.float32(1e-38), -0.0, np.inf], dtype=np.float32)),
                   ("s", np.zeros((0, 2), dtype=np.float32))]
        blob = checkpoint.dumps("text", {"z": 1, "a": [1, 2]}, tensors)
        kind, cfg, loaded = checkpoint.loads(blob)
        assert kind == "text" and cfg == {"z": 1, "a": [1, 2]}
        assert list(loaded) == ["a.w", "b", "s"]
        for name, arr in tensors:
            assert loaded[name].tobytes() == arr.tobytes()
        assert checkpoint.dumps(kind, cfg, loaded.items()) == blob

    def test_header(self):
        blob = checkpoint.dumps("vision", {}, [])
        assert blob.startswith(b"DFUSE1")

    def test_bad_magic_and_truncation(self):
        with pytest.raises(FormatError):
            checkpoint.loads(b"NOPE00")
        blob = checkpoint.dumps("k", {}, [("w", np.ones(3, dtype=np.float32))])
        with pytest.raises(FormatError):
            checkpoint.loads(blob[:-1])
