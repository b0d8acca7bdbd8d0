"""Independent reference implementations used only to check the fast paths."""

import numpy as np


def conv2d_loops(x, w, b, stride=1, pad=0):
    """Direct nested-loop cross-correlation; the oracle for conv2d."""
    n, h, wd, c_in = x.shape
    kh, kw, _, c_out = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, h_out, w_out, c_out), dtype=x.dtype)
    for img in range(n):
        for i in range(h_out):
            for j in range(w_out):
                for d in range(c_out):
                    acc = 0.0
                    for p in range(kh):
                        for q in range(kw):
                            for c in range(c_in):
                                acc += xp[img, i * stride + p, j * stride + q, c] * w[p, q, c, d]
                    y[img, i, j, d] = acc + b[d]
    return y


def conv1x1_loops(x, bank, bias):
    """Pointwise convolution oracle for the fusion bank."""
    n, h, w, c_in = x.shape
    c_out = bank.shape[3]
    y = np.zeros((n, h, w, c_out), dtype=x.dtype)
    for img in range(n):
        for i in range(h):
            for j in range(w):
                for d in range(c_out):
                    y[img, i, j, d] = (x[img, i, j] * bank[0, 0, :, d]).sum() + bias[d]
    return y
