"""Forward and backward kernels for the fixed layer vocabulary.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes ``(dout, cache)``.  Arrays keep the dtype they come in with, so the
same kernels serve the float64 test path and the float32 training path.

Convolutions are cross-correlations (no kernel flip).  Spatial layout is
channels-first: ``(B, C, T)`` for sequences and ``(B, C, H, W)`` for images.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DataError, DimensionError


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return ``(pad_before, pad_after, out_size)`` for "same" padding.

    Output size is ``ceil(size / stride)``.  When the total padding is odd the
    extra zero goes after the signal, so a window of 12 pads 5 before and 6
    after, and a stride-2 3x3 kernel on an even input pads 0 before, 1 after.
    """
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2, out


def _padding(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "same":
        return same_padding(size, kernel, stride)
    if padding == "valid":
        if size < kernel:
            raise DimensionError(f"kernel {kernel} longer than input {size} with valid padding")
        return 0, 0, (size - kernel) // stride + 1
    raise ConfigError(f"unknown padding {padding!r}; expected 'same' or 'valid'")


# -- dense -------------------------------------------------------------------

def dense_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"dense: input {x.shape} incompatible with weight {w.shape} / bias {b.shape}"
        )
    return x @ w + b, x


def dense_backward(dout, cache, w):
    x = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# -- 1D convolution and pooling ---------------------------------------------

def conv1d_forward(x, w, b, stride: int = 1, padding: str = "same"):
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with weight {w.shape}")
    B, C, T = x.shape
    O, _, K = w.shape
    if T == 0:
        raise DimensionError("conv1d: empty time axis")
    left, right, t_out = _padding(T, K, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right))) if left or right else x
    cols = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :][:, :, :t_out, :]
    cols = cols.transpose(0, 2, 1, 3).reshape(B * t_out, C * K)
    out = cols @ w.reshape(O, C * K).T + b
    out = out.reshape(B, t_out, O).transpose(0, 2, 1)
    return np.ascontiguousarray(out), (cols, x.shape, xp.shape[2], left, stride, t_out)


def conv1d_backward(dout, cache, w):
    cols, x_shape, tp, left, stride, t_out = cache
    B, C, T = x_shape
    O, _, K = w.shape
    d2 = dout.transpose(0, 2, 1).reshape(B * t_out, O)
    dw = (d2.T @ cols).reshape(w.shape)
    db = dout.sum(axis=(0, 2))
    dcols = (d2 @ w.reshape(O, C * K)).reshape(B, t_out, C, K)
    dxp = np.zeros((B, C, tp), dtype=dout.dtype)
    span = stride * (t_out - 1) + 1
    for k in range(K):
        dxp[:, :, k:k + span:stride] += dcols[:, :, :, k].transpose(0, 2, 1)
    return dxp[:, :, left:left + T], dw, db


def maxpool1d_forward(x, window: int, stride: int):
    if window < 1 or stride < 1:
        raise ConfigError(f"maxpool1d: window={window}, stride={stride} must be >= 1")
    B, C, T = x.shape
    if T < window:
        raise DimensionError(f"maxpool1d: sequence length {T} shorter than window {window}")
    t_out = (T - window) // stride + 1
    win = sliding_window_view(x, window, axis=2)[:, :, ::stride, :][:, :, :t_out, :]
    idx = win.argmax(axis=3)  # argmax keeps the first index on ties
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    return out, (idx, x.shape, window, stride)


def maxpool1d_backward(dout, cache):
    idx, shape, window, stride = cache
    dx = np.zeros(shape, dtype=dout.dtype)
    t_out = idx.shape[2]
    span = stride * (t_out - 1) + 1
    for k in range(window):
        dx[:, :, k:k + span:stride] += np.where(idx == k, dout, 0)
    return dx


def max_over_time_forward(x):
    if x.ndim != 3 or x.shape[2] == 0:
        raise DimensionError(f"max_over_time: expected (B, C, T>=1), got {x.shape}")
    idx = x.argmax(axis=2)
    return np.take_along_axis(x, idx[..., None], axis=2)[..., 0], (idx, x.shape)


def max_over_time_backward(dout, cache):
    idx, shape = cache
    dx = np.zeros(shape, dtype=dout.dtype)
    np.put_along_axis(dx, idx[..., None], dout[..., None], axis=2)
    return dx


# -- 2D convolutions ---------------------------------------------------------

def conv2d_forward(x, w, b, stride: int = 1):
    """Full cross-correlation with "same" padding; ``w`` is ``(O, C, KH, KW)``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    B, C, H, W = x.shape
    O, _, KH, KW = w.shape
    top, bottom, h_out = same_padding(H, KH, stride)
    lft, rgt, w_out = same_padding(W, KW, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (lft, rgt)))
    win = sliding_window_view(xp, (KH, KW), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :h_out, :w_out]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * h_out * w_out, C * KH * KW)
    out = cols @ w.reshape(O, -1).T + b
    out = np.ascontiguousarray(out.reshape(B, h_out, w_out, O).transpose(0, 3, 1, 2))
    return out, (cols, x.shape, xp.shape, top, lft, stride)


def conv2d_backward(dout, cache, w):
    cols, x_shape, xp_shape, top, lft, stride = cache
    B, C, H, W = x_shape
    O, _, KH, KW = w.shape
    _, _, h_out, w_out = dout.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (d2.T @ cols).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols = (d2 @ w.reshape(O, -1)).reshape(B, h_out, w_out, C, KH, KW)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    hs, ws = stride * (h_out - 1) + 1, stride * (w_out - 1) + 1
    for i in range(KH):
        for j in range(KW):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, top:top + H, lft:lft + W], dw, db


def depthwise_conv2d_forward(x, w, b, stride: int = 1):
    """One ``KH x KW`` filter per channel; ``w`` is ``(C, KH, KW)``."""
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"depthwise_conv2d: input {x.shape} incompatible with weight {w.shape}")
    B, C, H, W = x.shape
    _, KH, KW = w.shape
    top, bottom, h_out = same_padding(H, KH, stride)
    lft, rgt, w_out = same_padding(W, KW, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (lft, rgt)))
    hs, ws = stride * (h_out - 1) + 1, stride * (w_out - 1) + 1
    out = np.zeros((B, C, h_out, w_out), dtype=x.dtype)
    for i in range(KH):
        for j in range(KW):
            out += w[:, i, j][None, :, None, None] * xp[:, :, i:i + hs:stride, j:j + ws:stride]
    out += b[None, :, None, None]
    return out, (xp, x.shape, top, lft, stride)


def depthwise_conv2d_backward(dout, cache, w):
    xp, x_shape, top, lft, stride = cache
    _, _, H, W = x_shape
    _, KH, KW = w.shape
    _, _, h_out, w_out = dout.shape
    hs, ws = stride * (h_out - 1) + 1, stride * (w_out - 1) + 1
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for i in range(KH):
        for j in range(KW):
            patch = xp[:, :, i:i + hs:stride, j:j + ws:stride]
            dw[:, i, j] = np.einsum("bchw,bchw->c", dout, patch)
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dout * w[:, i, j][None, :, None, None]
    db = dout.sum(axis=(0, 2, 3))
    return dxp[:, :, top:top + H, lft:lft + W], dw, db


def pointwise_conv2d_forward(x, w, b, stride: int = 1):
    """1x1 channel mixing; ``w`` is ``(O, C)``.  Stride samples rows/cols 0, s, 2s, ..."""
    if x.ndim != 4 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"pointwise_conv2d: input {x.shape} incompatible with weight {w.shape}")
    xs = x[:, :, ::stride, ::stride] if stride > 1 else x
    B, C, H, W = xs.shape
    flat = xs.reshape(B, C, H * W)
    out = np.matmul(w, flat) + b[None, :, None]
    return out.reshape(B, w.shape[0], H, W), (flat, x.shape, stride)


def pointwise_conv2d_backward(dout, cache, w):
    flat, x_shape, stride = cache
    B, O, H, W = dout.shape
    d = dout.reshape(B, O, H * W)
    dw = np.tensordot(d, flat, axes=([0, 2], [0, 2]))
    db = d.sum(axis=(0, 2))
    dxs = np.matmul(w.T, d).reshape(B, w.shape[1], H, W)
    if stride == 1:
        return dxs, dw, db
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, ::stride, ::stride] = dxs
    return dx, dw, db


def global_avg_pool2d_forward(x):
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"global_avg_pool2d: expected (B, C, H>=1, W>=1), got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool2d_backward(dout, shape):
    H, W = shape[2], shape[3]
    return np.broadcast_to((dout / (H * W))[:, :, None, None], shape).copy()


# -- elementwise and normalization ------------------------------------------

def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dout, mask):
    return np.where(mask, dout, 0).astype(dout.dtype, copy=False)


def dropout_forward(x, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bn_view(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training: bool,
                      momentum: float = 0.9, eps: float = 1e-5):
    """Normalize over every axis except the channel axis 1.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    if eps <= 0:
        raise ConfigError(f"batchnorm epsilon must be > 0, got {eps}")
    axes = _bn_axes(x)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)
    out = xhat * _bn_view(gamma, x.ndim) + _bn_view(beta, x.ndim)
    return out.astype(x.dtype, copy=False), (xhat, inv_std, training)


def batchnorm_backward(dout, cache, gamma):
    xhat, inv_std, training = cache
    axes = _bn_axes(dout)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * _bn_view(gamma, dout.ndim)
    if not training:
        return dxhat * _bn_view(inv_std, dout.ndim), dgamma, dbeta
    n = dout.size // dout.shape[1]
    sum_dxhat = _bn_view(dxhat.sum(axis=axes), dout.ndim)
    sum_dxhat_xhat = _bn_view((dxhat * xhat).sum(axis=axes), dout.ndim)
    dx = (_bn_view(inv_std, dout.ndim) / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


# -- loss --------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``.

    The log-sum-exp is evaluated as ``log1p`` of the non-maximal terms so that
    near-certain predictions keep full relative precision.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    B, K = logits.shape
    if B and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    top = logits.argmax(axis=1)
    z = logits - logits[np.arange(B), top][:, None]
    e = np.exp(z)
    rest = e.copy()
    rest[np.arange(B), top] = 0.0
    lse = np.log1p(rest.sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(B), labels]))
    probs = e / e.sum(axis=1, keepdims=True)
    grad = probs
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B
