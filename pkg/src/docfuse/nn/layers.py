"""Parameterized layers with explicit forward/backward passes.

A layer is built once against a per-sample input shape (batch axis excluded).
``build`` validates the shape rule and returns the output shape, so a
mis-composed graph fails at construction time rather than mid-forward.  When
``build`` is called without an rng only the shape algebra runs and no
parameters are allocated, which is how full-size presets are checked cheaply.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import ConfigError, DimensionError
from . import functional as F
from .init import he_init

Shape = tuple[int, ...]


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def build(self, in_shape: Shape, rng: np.random.Generator | None = None,
              dtype=np.float32) -> Shape:
        return tuple(in_shape)

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, "Layer", str]]:
        """Yield ``(qualified_name, owner, key)`` in graph order."""
        for key in self.params:
            yield prefix + key, self, key

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Layer", str]]:
        for key in self.buffers:
            yield prefix + key, self, key

    def __repr__(self):
        return f"{type(self).__name__}()"


def _expect_rank(kind: str, shape: Shape, rank: int, what: str) -> None:
    if len(shape) != rank:
        raise DimensionError(f"{kind}: expected {what} input, got shape {tuple(shape)}")


class Dense(Layer):
    kind = "dense"

    def __init__(self, out_features: int):
        super().__init__()
        if out_features < 1:
            raise ConfigError(f"dense width must be >= 1, got {out_features}")
        self.out_features = out_features

    def build(self, in_shape, rng=None, dtype=np.float32):
        _expect_rank(self.kind, in_shape, 1, "(features,)")
        if rng is not None:
            self._add_param("w", he_init((in_shape[0], self.out_features), in_shape[0], rng, dtype))
            self._add_param("b", np.zeros(self.out_features, dtype=dtype))
        return (self.out_features,)

    def forward(self, x, training=False, rng=None):
        out, self._cache = F.dense_forward(x, self.params["w"], self.params["b"])
        return out

    def backward(self, dout):
        dx, self.grads["w"], self.grads["b"] = F.dense_backward(dout, self._cache, self.params["w"])
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        out, self._cache = F.relu_forward(x)
        return out

    def backward(self, dout):
        return F.relu_backward(dout, self._cache)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float = 0.5):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        out, self._cache = F.dropout_forward(x, self.rate, training, rng)
        return out

    def backward(self, dout):
        return F.dropout_backward(dout, self._cache)


class BatchNorm(Layer):
    """Batch normalization over channel axis 1; works for dense, 1D and 2D inputs."""

    kind = "batchnorm"

    def __init__(self, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ConfigError(f"batchnorm epsilon must be > 0, got {eps}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"batchnorm momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self.eps = eps

    def build(self, in_shape, rng=None, dtype=np.float32):
        if len(in_shape) < 1:
            raise DimensionError("batchnorm: needs at least a channel axis")
        if rng is not None:
            c = in_shape[0]
            self._add_param("gamma", np.ones(c, dtype=dtype))
            self._add_param("beta", np.zeros(c, dtype=dtype))
            self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
            self.buffers["running_var"] = np.ones(c, dtype=dtype)
        return tuple(in_shape)

    def forward(self, x, training=False, rng=None):
        out, self._cache = F.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            training, self.momentum, self.eps,
        )
        return out

    def backward(self, dout):
        dx, self.grads["gamma"], self.grads["beta"] = F.batchnorm_backward(
            dout, self._cache, self.params["gamma"])
        return dx


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, out_channels: int, kernel: int, stride: int = 1, padding: str = "same"):
        super().__init__()
        if out_channels < 1 or kernel < 1 or stride < 1:
            raise ConfigError(f"conv1d: bad config out={out_channels} kernel={kernel} stride={stride}")
        if padding not in ("same", "valid"):
            raise ConfigError(f"unknown padding {padding!r}")
        self.out_channels, self.kernel, self.stride, self.padding = out_channels, kernel, stride, padding

    def build(self, in_shape, rng=None, dtype=np.float32):
        _expect_rank(self.kind, in_shape, 2, "(channels, time)")
        c, t = in_shape
        if t < 1:
            raise DimensionError("conv1d: empty time axis")
        if self.padding == "valid":
            if t < self.kernel:
                raise DimensionError(f"conv1d: window {self.kernel} exceeds length {t}")
            t_out = (t - self.kernel) // self.stride + 1
        else:
            t_out = F.same_padding(t, self.kernel, self.stride)[2]
        if rng is not None:
            fan_in = c * self.kernel
            self._add_param("w", he_init((self.out_channels, c, self.kernel), fan_in, rng, dtype))
            self._add_param("b", np.zeros(self.out_channels, dtype=dtype))
        return (self.out_channels, t_out)

    def forward(self, x, training=False, rng=None):
        out, self._cache = F.conv1d_forward(x, self.params["w"], self.params["b"],
                                            self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, self.grads["w"], self.grads["b"] = F.conv1d_backward(dout, self._cache, self.params["w"])
        return dx


class MaxPool1d(Layer):
    kind = "maxpool1d"

    def __init__(self, window: int = 2, stride: int = 2):
        super().__init__()
        if window < 1 or stride < 1:
            raise ConfigError(f"maxpool1d: window={window}, stride={stride} must be >= 1")
        self.window, self.stride = window, stride

    def build(self, in_shape, rng=None, dtype=np.float32):
        _expect_rank(self.kind, in_shape, 2, "(channels, time)")
        c, t = in_shape
        if t < self.window:
            raise DimensionError(f"maxpool1d: length {t} shorter than window {self.window}")
        return (c, (t - self.window) // self.stride + 1)

    def forward(self, x, training=False, rng=None):
        out, self._cache = F.maxpool1d_forward(x, self.window, self.stride)
        return out

    def backward(self, dout):
        return F.maxpool1d_backward(dout, self._cache)


class MaxOverTime(Layer):
    kind = "maxovertime"

    def build(self, in_shape, rng=None, dtype=np.float32):
        _expect_rank(self.kind, in_shape, 2, "(channels, time)")
        if in_shape[1] < 1:
            raise DimensionError("max_over_time: empty time axis")
        return (in_shape[0],)

    def forward(self, x, training=False, rng=None):
        out, self._cache = F.max_over_time_forward(x)
        return out

    def backward(self, dout):
        return F.max_over_time_backward(dout, self._cache)


def _spatial_out(shape, stride):
    _, h, w = shape
    return -(-h // stride), -(-w // stride)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, out_channels: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        if stride not in (1, 2) or kernel < 1 or out_channels < 1:
            raise ConfigError(f"conv2d: bad config out={out_channels} kernel={kernel} stride={stride}")
        self.out_channels, self.kernel, self.stride = out_channels, kernel, stride

    def build(self, in_shape, rng=None, dtype=np.float32):
        _expect_rank(self.kind, in_shape, 3, "(channels, height, width)")
        c = in_shape[0]
        if rng is not None:
            k = self.kernel
            self._add_param("w", he_init((self.out_channels, c, k, k), c * k * k, rng, dtype))
            self._add_param("b", np.zeros(self.out_channels, dtype=dtype))
        return (self.out_channels, *_spatial_out(in_shape, self.stride))

    def forward(self, x, training=False, rng=None):
        out, self._cache = F.conv2d_forward(x, self.params["w"], self.params["b"], self.stride)
        return out

    def backward(self, dout):
        dx, self.grads["w"], self.grads["b"] = F.conv2d_backward(dout, self._cache, self.params["w"])
        return dx


class DepthwiseConv2d(Layer):
    kind = "depthwiseconv2d"

    def __init__(self, kernel: int = 3, stride: int = 1):
        super().__init__()
        if stride not in (1, 2) or kernel < 1:
            raise ConfigError(f"depthwise_conv2d: bad config kernel={kernel} stride={stride}")
        self.kernel, self.stride = kernel, stride

    def build(self, in_shape, rng=None, dtype=np.float32):
        _expect_rank(self.kind, in_shape, 3, "(channels, height, width)")
        c = in_shape[0]
        if rng is not None:
            k = self.kernel
            self._add_param("w", he_init((c, k, k), k * k, rng, dtype))
            self._add_param("b", np.zeros(c, dtype=dtype))
        return (c, *_spatial_out(in_shape, self.stride))

    def forward(self, x, training=False, rng=None):
        out, self._cache = F.depthwise_conv2d_forward(x, self.params["w"], self.params["b"], self.stride)
        return out

    def backward(self, dout):
        dx, self.grads["w"], self.grads["b"] = F.depthwise_conv2d_backward(
            dout, self._cache, self.params["w"])
        return dx


class PointwiseConv2d(Layer):
    kind = "pointwiseconv2d"

    def __init__(self, out_channels: int, stride: int = 1):
        super().__init__()
        if stride not in (1, 2) or out_channels < 1:
            raise ConfigError(f"pointwise_conv2d: bad config out={out_channels} stride={stride}")
        self.out_channels, self.stride = out_channels, stride

    def build(self, in_shape, rng=None, dtype=np.float32):
        _expect_rank(self.kind, in_shape, 3, "(channels, height, width)")
        c = in_shape[0]
        if rng is not None:
            self._add_param("w", he_init((self.out_channels, c), c, rng, dtype))
            self._add_param("b", np.zeros(self.out_channels, dtype=dtype))
        return (self.out_channels, *_spatial_out(in_shape, self.stride))

    def forward(self, x, training=False, rng=None):
        out, self._cache = F.pointwise_conv2d_forward(x, self.params["w"], self.params["b"], self.stride)
        return out

    def backward(self, dout):
        dx, self.grads["w"], self.grads["b"] = F.pointwise_conv2d_backward(
            dout, self._cache, self.params["w"])
        return dx


class GlobalAvgPool2d(Layer):
    kind = "globalavgpool2d"

    def build(self, in_shape, rng=None, dtype=np.float32):
        _expect_rank(self.kind, in_shape, 3, "(channels, height, width)")
        if in_shape[1] < 1 or in_shape[2] < 1:
            raise DimensionError(f"global_avg_pool2d: empty spatial extent {in_shape}")
        return (in_shape[0],)

    def forward(self, x, training=False, rng=None):
        out, self._cache = F.global_avg_pool2d_forward(x)
        return out

    def backward(self, dout):
        return F.global_avg_pool2d_backward(dout, self._cache)


class Sequential(Layer):
    """Ordered container; parameter names are ``"<index>.<key>"`` recursively."""

    kind = "sequential"

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = list(layers)
        self.shapes: list[Shape] = []

    def build(self, in_shape, rng=None, dtype=np.float32):
        shape = tuple(in_shape)
        self.shapes = [shape]
        for layer in self.layers:
            try:
                shape = layer.build(shape, rng, dtype)
            except DimensionError as exc:
                raise DimensionError(f"layer {len(self.shapes) - 1} ({layer.kind}): {exc}") from None
            self.shapes.append(tuple(shape))
        return shape

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training, rng)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_params(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}{i}.")

    def named_buffers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_buffers(f"{prefix}{i}.")

    def __repr__(self):
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"Sequential([{inner}])"


class SoftmaxCrossEntropy:
    """Loss head; kept outside the layer graph because it also takes labels."""

    kind = "softmaxxent"

    def __init__(self):
        self._grad = None

    def forward(self, logits, labels) -> float:
        loss, self._grad = F.softmax_cross_entropy(logits, labels)
        return loss

    def backward(self):
        return self._grad
