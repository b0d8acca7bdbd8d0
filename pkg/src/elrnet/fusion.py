"""Operators that merge spatial and temporal feature maps into one trunk.

Three fusions are supported, all preserving the spatial dimensions:

* sum      -- elementwise addition of channel-aligned maps
* concat   -- channel interleaving: output channel 2d holds the spatial
              channel d, channel 2d+1 the temporal channel d
* conv     -- interleaved concat followed by a learned 1x1 convolution
              with D_out = round(0.5 * D_concat) filters

All functions take batched maps [N,H,W,D]; fully-connected activations are
fused by viewing them as 1x1 maps.  Forwards return ``(output, cache)``,
backwards return the gradients for both input maps (plus filter-bank
gradients for conv fusion).

Note on concat order: any 1x1 convolution stacked on top is invariant to
the interleaved channel permutation up to the matching permutation of its
filter rows, so block concatenation would train to the same network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import conv2d_backward, conv2d_forward

__all__ = [
    "FusionConvParams",
    "fuse_sum_forward",
    "fuse_sum_backward",
    "fuse_concat_forward",
    "fuse_concat_backward",
    "fuse_conv_forward",
    "fuse_conv_backward",
]


@dataclass
class FusionConvParams:
    """1x1 filter bank [1,1,D_in,D_out] and bias for conv fusion.

    The bank must halve the concatenated depth: D_out = round(0.5 * D_in).
    """

    filter_bank: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.filter_bank.ndim != 4 or self.filter_bank.shape[:2] != (1, 1):
            raise ValueError(
                f"fusion filter bank must be [1,1,Din,Dout], got {self.filter_bank.shape}")
        d_in, d_out = self.filter_bank.shape[2], self.filter_bank.shape[3]
        if d_out != int(np.floor(0.5 * d_in + 0.5)):
            raise ValueError(
                f"fusion bank must have round(0.5*{d_in}) = {round(0.5 * d_in)} "
                f"filters, got {d_out}")
        if self.bias.shape != (d_out,):
            raise ValueError(f"fusion bias must have shape ({d_out},), got {self.bias.shape}")


def _check_maps(x_s, x_t, channels_equal):
    if x_s.ndim != 4 or x_t.ndim != 4:
        raise ValueError(
            f"fusion expects batched [N,H,W,D] maps, got {x_s.shape} and {x_t.shape}")
    if x_s.shape[:3] != x_t.shape[:3]:
        raise ValueError(
            f"spatial mismatch between fused maps: {x_s.shape} vs {x_t.shape}")
    if channels_equal and x_s.shape[3] != x_t.shape[3]:
        raise ValueError(
            f"channel mismatch between fused maps: {x_s.shape[3]} vs {x_t.shape[3]}")


def fuse_sum_forward(x_s, x_t):
    """y(i,j,d) = x_s(i,j,d) + x_t(i,j,d); requires identical shapes."""
    _check_maps(x_s, x_t, channels_equal=True)
    return x_s + x_t, None


def fuse_sum_backward(dy, cache=None):
    return dy, dy.copy()


def fuse_concat_forward(x_s, x_t):
    """Interleave channels of two equal-shape maps; output depth doubles."""
    _check_maps(x_s, x_t, channels_equal=True)
    n, h, w, d = x_s.shape
    y = np.stack([x_s, x_t], axis=-1).reshape(n, h, w, 2 * d)
    return y, None


def fuse_concat_backward(dy, cache=None):
    n, h, w, d2 = dy.shape
    pair = dy.reshape(n, h, w, d2 // 2, 2)
    return np.ascontiguousarray(pair[..., 0]), np.ascontiguousarray(pair[..., 1])


def fuse_conv_forward(x_s, x_t, params: FusionConvParams):
    """Interleaved concat followed by a 1x1 convolution with bias."""
    _check_maps(x_s, x_t, channels_equal=True)
    d_o = x_s.shape[3] + x_t.shape[3]
    if params.filter_bank.shape[2] != d_o:
        raise ValueError(
            f"fusion bank expects depth {params.filter_bank.shape[2]}, "
            f"concatenated maps have depth {d_o}")
    cat, _ = fuse_concat_forward(x_s, x_t)
    y, conv_cache = conv2d_forward(cat, params.filter_bank, params.bias, stride=1, pad=0)
    return y, conv_cache


def fuse_conv_backward(dy, cache):
    """Returns (dx_s, dx_t, d_filter_bank, d_bias)."""
    dcat, dw, db = conv2d_backward(dy, cache)
    dx_s, dx_t = fuse_concat_backward(dcat)
    return dx_s, dx_t, dw, db
