"""Neural-network ops on top of the autodiff engine.

Convolution uses an im2col + matmul forward; the input gradient is folded
back with a small loop over kernel offsets so everything stays vectorized.
All ops are deterministic given identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, accumulate
from .errors import ShapeError


def _im2col(padded, kh, kw, stride, oh, ow):
    n, c, _, _ = padded.shape
    sn, sc, sh, sw = padded.strides
    view = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(n * oh * ow, c * kh * kw)


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-d cross-correlation, NCHW input, OIHW weights, zero padding."""
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weights")
    n, c, h, wdim = xv.shape
    o, i, kh, kw = wv.shape
    if c != i:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weights expect {i}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wdim + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d output would be empty")

    if pad:
        padded = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        padded = xv
    cols = _im2col(padded, kh, kw, stride, oh, ow)
    w_mat = wv.reshape(o, -1)
    out_v = (cols @ w_mat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out_v = out_v + bias.value[None, :, None, None]

    parents = (x, w) if bias is None else (x, w, bias)
    out = Node(np.ascontiguousarray(out_v), parents, "conv2d", ad._requires(*parents))

    def _bk(up):
        g_mat = up.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        if w.requires_grad:
            accumulate(w, (g_mat.T @ cols).reshape(wv.shape))
        if bias is not None and bias.requires_grad:
            accumulate(bias, up.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            g_cols = (g_mat @ w_mat).reshape(n, oh, ow, i, kh, kw)
            g_pad = np.zeros_like(padded)
            for ki in range(kh):
                for kj in range(kw):
                    g_pad[:, :, ki:ki + stride * oh:stride,
                          kj:kj + stride * ow:stride] += \
                        g_cols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            if pad:
                accumulate(x, g_pad[:, :, pad:pad + h, pad:pad + wdim])
            else:
                accumulate(x, g_pad)

    out._backward = _bk
    return out


def dense(x, w, bias=None):
    """Fully connected layer: x (N, I) with weights (O, I)."""
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"dense shapes incompatible: {xv.shape} vs {wv.shape}")
    out_v = xv @ wv.T
    if bias is not None:
        out_v = out_v + bias.value[None, :]
    parents = (x, w) if bias is None else (x, w, bias)
    out = Node(out_v, parents, "dense", ad._requires(*parents))

    def _bk(up):
        if x.requires_grad:
            accumulate(x, up @ wv)
        if w.requires_grad:
            accumulate(w, up.T @ xv)
        if bias is not None and bias.requires_grad:
            accumulate(bias, up.sum(axis=0))

    out._backward = _bk
    return out


@dataclass
class BatchNormState:
    """Affine parameters plus running statistics for one channel axis."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels, dtype=np.float32):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batch_norm(x, gamma, beta, state, training):
    """Per-channel batch normalization over (N, H, W) of an NCHW tensor.

    Training mode normalizes with biased batch statistics and folds them
    into the running estimates (running <- momentum*running + (1-m)*batch);
    inference mode uses the running estimates.
    """
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError("batch_norm expects an NCHW tensor")
    if xv.shape[1] != gamma.value.shape[0]:
        raise ShapeError("batch_norm channel count mismatch")
    axes = (0, 2, 3)
    m = xv.shape[0] * xv.shape[2] * xv.shape[3]

    if training:
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        mom = state.momentum
        state.running_mean[...] = mom * state.running_mean + (1.0 - mom) * mean
        state.running_var[...] = mom * state.running_var + (1.0 - mom) * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xv - mean[None, :, None, None]) * inv[None, :, None, None]
    out_v = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]
    out = Node(out_v, (x, gamma, beta), "batch_norm", ad._requires(x, gamma, beta))

    def _bk(up):
        if gamma.requires_grad:
            accumulate(gamma, (up * xhat).sum(axis=axes))
        if beta.requires_grad:
            accumulate(beta, up.sum(axis=axes))
        if x.requires_grad:
            g_xhat = up * gamma.value[None, :, None, None]
            if training:
                s1 = g_xhat.sum(axis=axes)
                s2 = (g_xhat * xhat).sum(axis=axes)
                gx = (inv[None, :, None, None] / m) * (
                    m * g_xhat
                    - s1[None, :, None, None]
                    - xhat * s2[None, :, None, None]
                )
            else:
                gx = g_xhat * inv[None, :, None, None]
            accumulate(x, gx)

    out._backward = _bk
    return out


def max_pool2(x):
    """2x2 max pooling with stride 2; ties resolve to the first position."""
    xv = x.value
    n, c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    windows = xv.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, oh, ow, 4)
    arg = windows.argmax(axis=-1)
    out_v = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    out = Node(np.ascontiguousarray(out_v), (x,), "max_pool2", x.requires_grad)

    def _bk(up):
        if not x.requires_grad:
            return
        g_win = np.zeros_like(windows)
        np.put_along_axis(g_win, arg[..., None], up[..., None], axis=-1)
        gx = g_win.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        accumulate(x, gx.reshape(n, c, h, w))

    out._backward = _bk
    return out


def global_avg_pool(x):
    """Average over all spatial positions: NCHW -> NC."""
    xv = x.value
    n, c, h, w = xv.shape
    out = Node(xv.mean(axis=(2, 3)), (x,), "global_avg_pool", x.requires_grad)

    def _bk(up):
        accumulate(x, np.broadcast_to(up[:, :, None, None] / (h * w), xv.shape))

    out._backward = _bk
    return out


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy between softmax(logits) and integer labels."""
    zv = logits.value
    labels = np.asarray(labels)
    if zv.ndim != 2 or labels.shape != (zv.shape[0],):
        raise ShapeError("softmax_cross_entropy expects (N, K) logits and (N,) labels")
    n = zv.shape[0]
    shifted = zv - zv.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    nll = log_z - shifted[np.arange(n), labels]
    out = Node(np.asarray(nll.mean(), dtype=zv.dtype), (logits,),
               "softmax_ce", logits.requires_grad)

    def _bk(up):
        if not logits.requires_grad:
            return
        probs = np.exp(shifted - log_z[:, None])
        probs[np.arange(n), labels] -= 1.0
        accumulate(logits, probs * (up / n))

    out._backward = _bk
    return out
