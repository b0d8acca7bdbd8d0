"""Dense tensor primitives with paired forward/backward passes.

Everything operates on plain numpy arrays in NHWC layout (batch, height,
width, channels).  Each forward returns ``(output, cache)``; the matching
backward consumes the cache plus the upstream gradient and returns input
and parameter gradients.  All primitives preserve the input dtype:
training runs in float32, gradient checks in float64.

Convolution is cross-correlation (no kernel flip).  Dropout is inverted
(survivors scaled at train time, eval is the identity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BatchNormState",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool_forward",
    "maxpool_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "dropout_forward",
    "dropout_backward",
    "relu_forward",
    "relu_backward",
    "linear_forward",
    "linear_backward",
    "softmax",
    "softmax_cross_entropy",
    "softmax_cross_entropy_backward",
]


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp, kh, kw, stride, h_out, w_out):
    """Unfold padded input [N,Hp,Wp,C] into rows of [kh*kw*C] patch values."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # [N, H', W', C, kh, kw]
    win = win.transpose(0, 1, 2, 4, 5, 3)       # [N, H', W', kh, kw, C]
    n = win.shape[0]
    return np.ascontiguousarray(win).reshape(n * h_out * w_out, kh * kw * xp.shape[3])


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlate x[N,H,W,Din] with filters w[kh,kw,Din,Dout] plus bias.

    Output spatial size is floor((H + 2*pad - kh)/stride) + 1 (same for W).
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 4-d NHWC input, got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d [kh,kw,Din,Dout] filters, got shape {w.shape}")
    n, h, wd, din = x.shape
    kh, kw, fdin, dout = w.shape
    if fdin != din:
        raise ValueError(
            f"channel mismatch: input has {din} channels, filters expect {fdin}")
    if b.shape != (dout,):
        raise ValueError(f"bias must have shape ({dout},), got {b.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")

    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (wd + 2 * pad - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    y = cols @ w.reshape(-1, dout) + b
    y = y.reshape(n, h_out, w_out, dout)
    cache = (xp, w, stride, pad, x.shape)
    return y, cache


def conv2d_backward(dy, cache):
    """Gradients of conv2d w.r.t. input, filters and bias."""
    xp, w, stride, pad, x_shape = cache
    n, h_out, w_out, dout = dy.shape
    kh, kw, din, _ = w.shape

    dy2 = dy.reshape(-1, dout)
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)

    dcols = dy2 @ w.reshape(-1, dout).T
    dcols = dcols.reshape(n, h_out, w_out, kh, kw, din)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h_out * stride:stride, j:j + w_out * stride:stride, :] += \
                dcols[:, :, :, i, j, :]
    if pad:
        dx = dxp[:, pad:pad + x_shape[1], pad:pad + x_shape[2], :]
    else:
        dx = dxp
    return dx, dw, db


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2

def maxpool_forward(x):
    """Max over non-overlapping 2x2 windows; requires even H and W."""
    n, h, w, d = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool requires even spatial dims, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, d).transpose(0, 1, 3, 2, 4, 5)
    win = np.ascontiguousarray(win).reshape(n, h // 2, w // 2, 4, d)
    # argmax returns the first maximum in row-major window order (tie rule)
    idx = win.argmax(axis=3)
    y = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return y, (idx, x.shape)


def maxpool_backward(dy, cache):
    idx, x_shape = cache
    n, h, w, d = x_shape
    dwin = np.zeros((n, h // 2, w // 2, 4, d), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
    dwin = dwin.reshape(n, h // 2, w // 2, 2, 2, d).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(dwin).reshape(n, h, w, d)


# ---------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    ``running_mean``/``running_var`` are updated in place by train-mode
    forward passes, so they may be long-lived arrays owned by a network.
    """

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5


def batchnorm_forward(x, state: BatchNormState, mode):
    """Normalize x[N,H,W,D] per channel; train mode updates running stats."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects a 4-d NHWC input, got shape {x.shape}")
    d = x.shape[3]
    if state.scale.shape != (d,):
        raise ValueError(
            f"scale has shape {state.scale.shape}, input has {d} channels")
    eps = x.dtype.type(state.epsilon)

    if mode == "train":
        m = x.shape[0] * x.shape[1] * x.shape[2]
        if m < 2:
            raise ValueError("train-mode batch_norm needs at least 2 values per channel")
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mean) * inv_std
        mom = x.dtype.type(state.momentum)
        state.running_mean *= mom
        state.running_mean += (1 - mom) * mean
        state.running_var *= mom
        state.running_var += (1 - mom) * var
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        x_hat = (x - state.running_mean) * inv_std

    y = state.scale * x_hat + state.shift
    cache = (mode, x_hat, inv_std, state.scale)
    return y, cache


def batchnorm_backward(dy, cache):
    """Gradients w.r.t. input, scale and shift."""
    mode, x_hat, inv_std, scale = cache
    dscale = (dy * x_hat).sum(axis=(0, 1, 2))
    dshift = dy.sum(axis=(0, 1, 2))
    dx_hat = dy * scale
    if mode == "eval":
        return dx_hat * inv_std, dscale, dshift
    m = x_hat.shape[0] * x_hat.shape[1] * x_hat.shape[2]
    dx = (inv_std / m) * (
        m * dx_hat
        - dx_hat.sum(axis=(0, 1, 2))
        - x_hat * (dx_hat * x_hat).sum(axis=(0, 1, 2))
    )
    return dx, dscale, dshift


# ---------------------------------------------------------------------------
# dropout

def dropout_forward(x, drop_probability, mode, rng=None):
    """Inverted dropout: zero units with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= drop_probability < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {drop_probability}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or drop_probability == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout with p > 0 requires an rng")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = gen.random(x.shape) >= drop_probability
    scale = x.dtype.type(1.0 / (1.0 - drop_probability))
    mask = keep.astype(x.dtype) * scale
    return x * mask, mask


def dropout_backward(dy, cache):
    if cache is None:
        return dy
    return dy * cache


# ---------------------------------------------------------------------------
# relu

def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, cache):
    return dy * cache


# ---------------------------------------------------------------------------
# fully connected

def linear_forward(x, w, b):
    """y = x @ w + b for x[N,Din], w[Din,Dout], b[Dout]."""
    if x.ndim != 2:
        raise ValueError(f"linear expects a 2-d input, got shape {x.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(
            f"shape mismatch: input has {x.shape[1]} features, weights expect {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"bias must have shape ({w.shape[1]},), got {b.shape}")
    return x @ w + b, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------------------------
# softmax cross-entropy

def softmax(logits):
    """Row-wise softmax, numerically stabilized."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true class.

    Returns ``(loss, probabilities)``; probability rows sum to 1.
    """
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(
            f"labels must lie in [0, {c}), got range "
            f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    return loss, np.exp(log_probs)


def softmax_cross_entropy_backward(probs, labels):
    """Gradient of the mean cross-entropy loss w.r.t. the logits."""
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1
    return d / n
