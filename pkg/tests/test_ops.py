import numpy as np
import pytest

from elrnet import ops
from elrnet.gradcheck import numeric_grad, rel_error

from oracles import conv2d_loops


# ---------------------------------------------------------------------------
# conv2d

def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6, 5, 1))
    w = np.ones((1, 1, 1, 1))
    y, _ = ops.conv2d_forward(x, w, np.zeros(1))
    np.testing.assert_array_equal(y, x)


def test_conv2d_all_ones_4x4():
    x = np.ones((1, 4, 4, 1))
    w = np.ones((3, 3, 1, 1))
    y, _ = ops.conv2d_forward(x, w, np.zeros(1))
    np.testing.assert_array_equal(y, np.full((1, 2, 2, 1), 9.0))


def test_conv2d_output_shape_formula():
    x = np.zeros((1, 9, 7, 2))
    w = np.zeros((3, 3, 2, 4))
    y, _ = ops.conv2d_forward(x, w, np.zeros(4), stride=2, pad=1)
    assert y.shape == (1, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1, 4)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 6, 7, 3))
    w = rng.normal(size=(3, 3, 3, 2))
    b = rng.normal(size=2)
    y, _ = ops.conv2d_forward(x, w, b, stride, pad)
    np.testing.assert_allclose(y, conv2d_loops(x, w, b, stride, pad), atol=1e-12)


def test_conv2d_channel_mismatch_rejected():
    x = np.zeros((1, 5, 5, 2))
    w = np.zeros((3, 3, 3, 4))
    with pytest.raises(ValueError, match="channel mismatch"):
        ops.conv2d_forward(x, w, np.zeros(4))


def test_conv2d_kernel_too_large_rejected():
    with pytest.raises(ValueError, match="larger than"):
        ops.conv2d_forward(np.zeros((1, 3, 3, 1)), np.zeros((5, 5, 1, 1)), np.zeros(1))


def test_conv2d_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    y, cache = ops.conv2d_forward(x, w, b, stride=1, pad=1)
    r = rng.normal(size=y.shape)

    def f():
        out, _ = ops.conv2d_forward(x, w, b, stride=1, pad=1)
        return float((out * r).sum())

    dx, dw, db = ops.conv2d_backward(r, cache)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-6
    assert rel_error(dw, numeric_grad(f, w)) < 1e-6
    assert rel_error(db, numeric_grad(f, b)) < 1e-6


def test_conv2d_deterministic():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 6, 6, 2)).astype(np.float32)
    w = rng.normal(size=(3, 3, 2, 4)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    y1, _ = ops.conv2d_forward(x, w, b, 1, 1)
    y2, _ = ops.conv2d_forward(x, w, b, 1, 1)
    assert np.array_equal(y1, y2)


# ---------------------------------------------------------------------------
# max pool

def test_maxpool_constant_map():
    x = np.full((1, 6, 4, 2), 3.5)
    y, _ = ops.maxpool_forward(x)
    assert y.shape == (1, 3, 2, 2)
    np.testing.assert_array_equal(y, np.full((1, 3, 2, 2), 3.5))


def test_maxpool_single_window():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    y, _ = ops.maxpool_forward(x)
    assert y.item() == 4.0


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ValueError, match="even"):
        ops.maxpool_forward(np.zeros((1, 5, 4, 1)))


def test_maxpool_backward_one_hot_and_fd():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 8, 8, 1))
    y, cache = ops.maxpool_forward(x)
    r = rng.normal(size=y.shape)
    dx = ops.maxpool_backward(r, cache)
    # each window routes its entire gradient to exactly one cell
    windows = dx.reshape(1, 4, 2, 4, 2, 1).transpose(0, 1, 3, 2, 4, 5).reshape(16, 4)
    assert ((windows != 0).sum(axis=1) == 1).all()

    def f():
        out, _ = ops.maxpool_forward(x)
        return float((out * r).sum())

    assert rel_error(dx, numeric_grad(f, x)) < 1e-6


def test_maxpool_tie_takes_first_in_row_major_scan():
    x = np.zeros((1, 2, 2, 1))
    _, cache = ops.maxpool_forward(x)
    dx = ops.maxpool_backward(np.ones((1, 1, 1, 1)), cache)
    np.testing.assert_array_equal(dx[0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])


# ---------------------------------------------------------------------------
# batch norm

def _state(c, **kw):
    return ops.BatchNormState(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), **kw)


def test_batchnorm_constant_input_maps_to_shift():
    x = np.full((2, 3, 3, 2), 7.0)
    state = _state(2)
    state.shift = np.array([0.5, -1.0])
    y, _ = ops.batchnorm_forward(x, state, "train")
    np.testing.assert_allclose(y[..., 0], 0.5, atol=1e-6)
    np.testing.assert_allclose(y[..., 1], -1.0, atol=1e-6)


def test_batchnorm_normalizes_batch_statistics():
    rng = np.random.default_rng(6)
    x = rng.normal(3.0, 2.0, size=(4, 5, 5, 3))
    y, _ = ops.batchnorm_forward(x, _state(3), "train")
    assert np.abs(y.mean(axis=(0, 1, 2))).max() < 1e-6
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1.0, atol=1e-4)


def test_batchnorm_updates_running_stats():
    rng = np.random.default_rng(7)
    x = rng.normal(2.0, 1.5, size=(8, 4, 4, 1))
    state = _state(1)
    ops.batchnorm_forward(x, state, "train")
    expected_mean = 0.9 * 0.0 + 0.1 * x.mean()
    np.testing.assert_allclose(state.running_mean, expected_mean, rtol=1e-6)


def test_batchnorm_eval_uses_running_stats():
    x = np.full((1, 2, 2, 1), 4.0)
    state = _state(1)
    state.running_mean = np.array([4.0])
    state.running_var = np.array([1.0])
    y, _ = ops.batchnorm_forward(x, state, "eval")
    np.testing.assert_allclose(y, 0.0, atol=1e-5)


def test_batchnorm_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 3, 2, 2))
    gamma = rng.normal(size=2)
    beta = rng.normal(size=2)

    def make_state():
        return ops.BatchNormState(gamma, beta, np.zeros(2), np.ones(2))

    _, cache = ops.batchnorm_forward(x, make_state(), "train")
    r = rng.normal(size=x.shape)

    def f():
        out, _ = ops.batchnorm_forward(x, make_state(), "train")
        return float((out * r).sum())

    dx, dg, db = ops.batchnorm_backward(r, cache)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-5
    assert rel_error(dg, numeric_grad(f, gamma)) < 1e-5
    assert rel_error(db, numeric_grad(f, beta)) < 1e-5


def test_batchnorm_train_needs_two_values():
    with pytest.raises(ValueError, match="at least 2"):
        ops.batchnorm_forward(np.zeros((1, 1, 1, 3)), _state(3), "train")


# ---------------------------------------------------------------------------
# dropout

def test_dropout_p_zero_is_identity_in_train():
    x = np.arange(12.0).reshape(3, 4)
    y, _ = ops.dropout_forward(x, 0.0, "train")
    np.testing.assert_array_equal(y, x)


def test_dropout_eval_is_identity():
    x = np.arange(6.0)
    y, _ = ops.dropout_forward(x, 0.85, "eval")
    np.testing.assert_array_equal(y, x)


def test_dropout_rejects_p_one():
    with pytest.raises(ValueError, match=r"\[0, 1\)"):
        ops.dropout_forward(np.zeros(3), 1.0, "train", 0)


def test_dropout_same_seed_same_mask():
    x = np.ones(1000, dtype=np.float32)
    y1, _ = ops.dropout_forward(x, 0.5, "train", np.random.default_rng(11))
    y2, _ = ops.dropout_forward(x, 0.5, "train", np.random.default_rng(11))
    assert np.array_equal(y1, y2)


def test_dropout_085_survival_fraction_and_scaling():
    x = np.ones(10 ** 6, dtype=np.float64)
    y, _ = ops.dropout_forward(x, 0.85, "train", np.random.default_rng(12))
    survivors = y != 0
    assert abs(survivors.mean() - 0.15) < 0.002
    np.testing.assert_allclose(y[survivors], 1.0 / 0.15)


def test_dropout_backward_uses_same_mask():
    x = np.ones((4, 4))
    y, cache = ops.dropout_forward(x, 0.5, "train", np.random.default_rng(13))
    dy = np.ones_like(x)
    dx = ops.dropout_backward(dy, cache)
    np.testing.assert_array_equal(dx, y)


# ---------------------------------------------------------------------------
# linear

def test_linear_identity():
    x = np.random.default_rng(14).normal(size=(3, 4))
    y, _ = ops.linear_forward(x, np.eye(4), np.zeros(4))
    np.testing.assert_allclose(y, x)


def test_linear_hand_example():
    y, _ = ops.linear_forward(np.array([[1.0, 2.0]]), np.eye(2), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(y, [[2.0, 3.0]])


def test_linear_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape mismatch"):
        ops.linear_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))


def test_linear_gradients_match_finite_differences():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=5)
    y, cache = ops.linear_forward(x, w, b)
    r = rng.normal(size=y.shape)

    def f():
        out, _ = ops.linear_forward(x, w, b)
        return float((out * r).sum())

    dx, dw, db = ops.linear_backward(r, cache)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-6
    assert rel_error(dw, numeric_grad(f, w)) < 1e-6
    assert rel_error(db, numeric_grad(f, b)) < 1e-6


# ---------------------------------------------------------------------------
# softmax cross-entropy

def test_softmax_ce_uniform_logits_gives_log_c():
    for c in (2, 5, 12):
        logits = np.zeros((3, c))
        loss, probs = ops.softmax_cross_entropy(logits, np.zeros(3, dtype=int))
        np.testing.assert_allclose(loss, np.log(c), rtol=1e-12)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_ce_dominant_logit_drives_loss_to_zero():
    logits = np.array([[50.0, 0.0, 0.0]])
    loss, _ = ops.softmax_cross_entropy(logits, np.array([0]))
    assert loss < 1e-8


def test_softmax_ce_rejects_out_of_range_labels():
    with pytest.raises(ValueError, match="labels"):
        ops.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_softmax_ce_gradient_is_probs_minus_onehot():
    rng = np.random.default_rng(16)
    logits = rng.normal(size=(4, 6))
    labels = np.array([0, 5, 2, 2])
    _, probs = ops.softmax_cross_entropy(logits, labels)
    d = ops.softmax_cross_entropy_backward(probs, labels)
    onehot = np.eye(6)[labels]
    np.testing.assert_allclose(d, (probs - onehot) / 4)

    def f():
        loss, _ = ops.softmax_cross_entropy(logits, labels)
        return float(loss)

    assert rel_error(d, numeric_grad(f, logits)) < 1e-6


def test_all_primitives_finite_on_finite_inputs():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(2, 4, 4, 3)) * 100
    y, _ = ops.conv2d_forward(x, rng.normal(size=(3, 3, 3, 2)), rng.normal(size=2), 1, 1)
    assert np.isfinite(y).all()
    y, _ = ops.batchnorm_forward(x, _state(3), "train")
    assert np.isfinite(y).all()
    y, _ = ops.maxpool_forward(x)
    assert np.isfinite(y).all()
