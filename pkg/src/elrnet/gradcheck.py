"""Central finite-difference verification of every analytic backward pass.

Each check builds a scalar objective (a fixed random projection of the
primitive's output, or the classification loss for the full network),
perturbs every input element by +/-h in float64, and compares the numeric
gradient against the analytic one.  The reported relative error is
max |a - n| / max(|a| + |n|, 1e-8) over all elements.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import ops
from .fusion import (
    FusionConvParams,
    fuse_concat_backward,
    fuse_concat_forward,
    fuse_conv_backward,
    fuse_conv_forward,
    fuse_sum_backward,
    fuse_sum_forward,
)
from .net import NetworkSpec, build_network

__all__ = ["numeric_grad", "rel_error", "run_suite", "PRIMITIVE_TOL", "NETWORK_TOL"]

PRIMITIVE_TOL = 1e-5
NETWORK_TOL = 1e-3
STEP = 1e-5


def numeric_grad(f, x, h=STEP):
    """Central-difference gradient of scalar f() w.r.t. x, perturbed in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def rel_error(analytic, numeric):
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _projection(rng, shape):
    return rng.normal(size=shape)


def _check_conv2d(rng):
    n, h, w = rng.integers(1, 3), int(rng.integers(4, 8)), int(rng.integers(4, 8))
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.choice([0, 1]))
    x = rng.normal(size=(int(n), h, w, c_in))
    wgt = rng.normal(size=(k, k, c_in, c_out))
    b = rng.normal(size=c_out)
    y, cache = ops.conv2d_forward(x, wgt, b, stride, pad)
    r = _projection(rng, y.shape)

    def f():
        out, _ = ops.conv2d_forward(x, wgt, b, stride, pad)
        return float((out * r).sum())

    dx, dw, db = ops.conv2d_backward(r, cache)
    return max(rel_error(dx, numeric_grad(f, x)),
               rel_error(dw, numeric_grad(f, wgt)),
               rel_error(db, numeric_grad(f, b)))


def _check_maxpool(rng):
    n = int(rng.integers(1, 3))
    h, w = 2 * int(rng.integers(2, 5)), 2 * int(rng.integers(2, 5))
    c = int(rng.integers(1, 4))
    x = rng.normal(size=(n, h, w, c))
    y, cache = ops.maxpool_forward(x)
    r = _projection(rng, y.shape)

    def f():
        out, _ = ops.maxpool_forward(x)
        return float((out * r).sum())

    dx = ops.maxpool_backward(r, cache)
    return rel_error(dx, numeric_grad(f, x))


def _check_batchnorm(rng, mode):
    n, h, w = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 4))
    c = int(rng.integers(1, 4))
    x = rng.normal(size=(n, h, w, c))
    gamma = rng.normal(size=c)
    beta = rng.normal(size=c)
    run_mean = rng.normal(size=c)
    run_var = rng.random(c) + 0.5

    def make_state():
        return ops.BatchNormState(gamma, beta, run_mean.copy(), run_var.copy())

    _, cache = ops.batchnorm_forward(x, make_state(), mode)
    r = _projection(rng, x.shape)

    def f():
        out, _ = ops.batchnorm_forward(x, make_state(), mode)
        return float((out * r).sum())

    dx, dg, db = ops.batchnorm_backward(r, cache)
    return max(rel_error(dx, numeric_grad(f, x)),
               rel_error(dg, numeric_grad(f, gamma)),
               rel_error(db, numeric_grad(f, beta)))


def _check_linear(rng):
    n, d_in, d_out = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
    x = rng.normal(size=(n, d_in))
    w = rng.normal(size=(d_in, d_out))
    b = rng.normal(size=d_out)
    y, cache = ops.linear_forward(x, w, b)
    r = _projection(rng, y.shape)

    def f():
        out, _ = ops.linear_forward(x, w, b)
        return float((out * r).sum())

    dx, dw, db = ops.linear_backward(r, cache)
    return max(rel_error(dx, numeric_grad(f, x)),
               rel_error(dw, numeric_grad(f, w)),
               rel_error(db, numeric_grad(f, b)))


def _check_softmax_ce(rng):
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    logits = rng.normal(size=(n, c))
    labels = rng.integers(0, c, size=n)

    def f():
        loss, _ = ops.softmax_cross_entropy(logits, labels)
        return float(loss)

    _, probs = ops.softmax_cross_entropy(logits, labels)
    dlogits = ops.softmax_cross_entropy_backward(probs, labels)
    return rel_error(dlogits, numeric_grad(f, logits))


def _fusion_shapes(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    d = 2 * int(rng.integers(1, 4))
    return (n, h, w, d)


def _check_fuse_sum(rng):
    shape = _fusion_shapes(rng)
    x_s, x_t = rng.normal(size=shape), rng.normal(size=shape)
    y, _ = fuse_sum_forward(x_s, x_t)
    r = _projection(rng, y.shape)

    def f():
        out, _ = fuse_sum_forward(x_s, x_t)
        return float((out * r).sum())

    d_s, d_t = fuse_sum_backward(r)
    return max(rel_error(d_s, numeric_grad(f, x_s)),
               rel_error(d_t, numeric_grad(f, x_t)))


def _check_fuse_concat(rng):
    shape = _fusion_shapes(rng)
    x_s, x_t = rng.normal(size=shape), rng.normal(size=shape)
    y, _ = fuse_concat_forward(x_s, x_t)
    r = _projection(rng, y.shape)

    def f():
        out, _ = fuse_concat_forward(x_s, x_t)
        return float((out * r).sum())

    d_s, d_t = fuse_concat_backward(r)
    return max(rel_error(d_s, numeric_grad(f, x_s)),
               rel_error(d_t, numeric_grad(f, x_t)))


def _check_fuse_conv(rng):
    shape = _fusion_shapes(rng)
    x_s, x_t = rng.normal(size=shape), rng.normal(size=shape)
    d_cat = 2 * shape[3]
    bank = rng.normal(size=(1, 1, d_cat, d_cat // 2))
    bias = rng.normal(size=d_cat // 2)
    params = FusionConvParams(bank, bias)
    y, cache = fuse_conv_forward(x_s, x_t, params)
    r = _projection(rng, y.shape)

    def f():
        out, _ = fuse_conv_forward(x_s, x_t, FusionConvParams(bank, bias))
        return float((out * r).sum())

    d_s, d_t, dw, db = fuse_conv_backward(r, cache)
    return max(rel_error(d_s, numeric_grad(f, x_s)),
               rel_error(d_t, numeric_grad(f, x_t)),
               rel_error(dw, numeric_grad(f, bank)),
               rel_error(db, numeric_grad(f, bias)))


def full_network_check(seed=0, stream="fused"):
    """End-to-end gradient check of a tiny network in float64.

    Dropout is disabled (its implicit expectation is not differentiable
    through resampled masks) and weights are scaled up from the tiny
    initialization so batch-norm statistics are not curvature-dominated
    at the finite-difference step size.
    """
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(
        stream=stream,
        num_classes=2,
        input_size=8,
        conv_channels=(2, 3, 4),
        conv_kernels=(3, 3, 3),
        fc4_width=5,
        dropout=0.0,
        fusion="conv" if stream == "fused" else None,
        fusion_after="conv3" if stream == "fused" else None,
    )
    net = build_network(spec, seed, dtype=np.float64)
    for d in net.defs:
        if d.kind == "weight":
            net.params[d.name][0] *= 100.0
    n = 2
    if stream == "fused":
        batch = (rng.normal(size=(n, 8, 8, 3)), rng.normal(size=(n, 8, 8, 33)))
    else:
        batch = rng.normal(size=(n, 8, 8, spec.stream_channels(stream)))
    labels = rng.integers(0, 2, size=n)

    def loss_fn():
        # fresh running stats each call: train-mode forward mutates them
        for name in net.conv_layer_names:
            m, v = net.bn_running[name]
            m[...] = 0.0
            v[...] = 1.0
        logits, _ = net.forward(batch, "train")
        loss, _ = ops.softmax_cross_entropy(logits, labels)
        return float(loss)

    loss_fn()
    logits, cache = net.forward(batch, "train")
    _, probs = ops.softmax_cross_entropy(logits, labels)
    grads = net.backward(cache, ops.softmax_cross_entropy_backward(probs, labels))

    worst = 0.0
    for d in net.defs:
        worst = max(worst, rel_error(grads[d.name], numeric_grad(loss_fn, net.params[d.name][0])))
    return worst


def run_suite(seed=0, instances=20):
    """Run every primitive check ``instances`` times plus the full-network check.

    Returns a list of (name, max_rel_err, tolerance, passed) tuples.
    """
    checks = [
        ("conv2d", _check_conv2d),
        ("max_pool", _check_maxpool),
        ("batch_norm_train", lambda rng: _check_batchnorm(rng, "train")),
        ("batch_norm_eval", lambda rng: _check_batchnorm(rng, "eval")),
        ("linear", _check_linear),
        ("softmax_cross_entropy", _check_softmax_ce),
        ("fuse_sum", _check_fuse_sum),
        ("fuse_concat", _check_fuse_concat),
        ("fuse_conv", _check_fuse_conv),
    ]
    results = []
    for name, check in checks:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = max(check(rng) for _ in range(instances))
        results.append((name, worst, PRIMITIVE_TOL, worst < PRIMITIVE_TOL))
    for stream in ("spatial", "fused"):
        worst = full_network_check(seed, stream)
        results.append((f"network_{stream}", worst, NETWORK_TOL, worst < NETWORK_TOL))
    return results
