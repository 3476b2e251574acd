"""Gradient checks against central finite differences (float64) and a naive
convolution oracle, over many random layer instances."""

import numpy as np
import pytest

from needlenet.layers import (
    Conv2d,
    Dense,
    LstmCell,
    MaxPool2d,
    ReLU,
    dropout,
    dropout_backward,
    relu,
    softmax,
)
from needlenet.tensor import ShapeError

from conftest import numeric_grad, rel_error

GRAD_TOL = 1e-7


def naive_conv3x3(x, w, b):
    """Direct 6-loop 3x3 cross-correlation with zero padding 1, stride 1."""
    n, h, wd, c = x.shape
    f = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wd, f), dtype=x.dtype)
    for i in range(n):
        for y in range(h):
            for xx in range(wd):
                for ky in range(3):
                    for kx in range(3):
                        out[i, y, xx] += xp[i, y + ky, xx + kx] @ w[ky, kx]
    return out + b


@pytest.mark.parametrize("trial", range(50))
def test_conv_forward_matches_naive_oracle(trial):
    rng = np.random.default_rng(1000 + trial)
    n = int(rng.integers(1, 3))
    h = int(rng.integers(1, 7))
    wd = int(rng.integers(1, 7))
    c = int(rng.integers(1, 5))
    f = int(rng.integers(1, 5))
    conv = Conv2d(c, f, rng, dtype=np.float64)
    x = rng.normal(size=(n, h, wd, c))
    conv.b.value = rng.normal(size=f)
    got = conv.forward(x, keep_cache=False)
    want = naive_conv3x3(x, conv.w.value, conv.b.value)
    assert rel_error(got, want) < 1e-12


@pytest.mark.parametrize("trial", range(20))
def test_conv_gradients(trial):
    rng = np.random.default_rng(2000 + trial)
    n = int(rng.integers(1, 3))
    h = int(rng.integers(2, 6))
    wd = int(rng.integers(2, 6))
    c = int(rng.integers(1, 4))
    f = int(rng.integers(1, 4))
    conv = Conv2d(c, f, rng, dtype=np.float64)
    conv.b.value = rng.normal(size=f)
    x = rng.normal(size=(n, h, wd, c))
    g_out = rng.normal(size=(n, h, wd, f))

    conv.forward(x, keep_cache=True)
    grad_x = conv.backward(g_out)

    def loss_wrt(which):
        def f_(arr):
            saved = {"x": x, "w": conv.w.value, "b": conv.b.value}
            saved[which] = arr
            w0, b0 = conv.w.value, conv.b.value
            conv.w.value, conv.b.value = saved["w"], saved["b"]
            out = conv.forward(saved["x"], keep_cache=False)
            conv.w.value, conv.b.value = w0, b0
            return float(np.sum(out * g_out))

        return f_

    assert rel_error(grad_x, numeric_grad(loss_wrt("x"), x)) < GRAD_TOL
    assert rel_error(conv.w.grad, numeric_grad(loss_wrt("w"), conv.w.value)) < GRAD_TOL
    assert rel_error(conv.b.grad, numeric_grad(loss_wrt("b"), conv.b.value)) < GRAD_TOL


def test_conv_channel_mismatch():
    conv = Conv2d(3, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        conv.forward(np.zeros((2, 4, 4, 5), dtype=np.float32))


def test_conv_single_frame_squeeze():
    rng = np.random.default_rng(3)
    conv = Conv2d(2, 3, rng, dtype=np.float64)
    x = rng.normal(size=(5, 5, 2))
    out = conv.forward(x, keep_cache=False)
    assert out.shape == (5, 5, 3)
    np.testing.assert_allclose(out, conv.forward(x[None], keep_cache=False)[0])


def test_conv_skips_input_grad_when_disabled():
    rng = np.random.default_rng(4)
    conv = Conv2d(2, 3, rng, dtype=np.float64, need_input_grad=False)
    x = rng.normal(size=(1, 4, 4, 2))
    conv.forward(x)
    assert conv.backward(np.ones((1, 4, 4, 3))) is None
    assert conv.w.grad is not None


@pytest.mark.parametrize("trial", range(20))
def test_maxpool_gradients(trial):
    rng = np.random.default_rng(3000 + trial)
    n = int(rng.integers(1, 3))
    h = 2 * int(rng.integers(1, 4))
    wd = 2 * int(rng.integers(1, 4))
    c = int(rng.integers(1, 4))
    pool = MaxPool2d()
    x = rng.normal(size=(n, h, wd, c))
    g_out = rng.normal(size=(n, h // 2, wd // 2, c))
    pool.forward(x)
    grad_x = pool.backward(g_out)
    num = numeric_grad(lambda a: float(np.sum(pool.forward(a, keep_cache=False) * g_out)), x)
    assert rel_error(grad_x, num) < GRAD_TOL


def test_maxpool_tie_goes_to_first_row_major_position():
    x = np.full((1, 2, 2, 1), 5.0)
    pool = MaxPool2d()
    pool.forward(x)
    grad = pool.backward(np.ones((1, 1, 1, 1)))
    # the (0, 0) corner of the window takes everything
    assert grad[0, 0, 0, 0] == 1.0
    assert grad.sum() == 1.0


def test_maxpool_conserves_gradient_mass():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 6, 6, 3))
    g = rng.normal(size=(2, 3, 3, 3))
    pool = MaxPool2d()
    pool.forward(x)
    assert abs(pool.backward(g).sum() - g.sum()) < 1e-12


def test_maxpool_rejects_odd_extent():
    with pytest.raises(ShapeError):
        MaxPool2d().forward(np.zeros((1, 3, 4, 1)))


@pytest.mark.parametrize("trial", range(20))
def test_dense_gradients(trial):
    rng = np.random.default_rng(4000 + trial)
    n = int(rng.integers(1, 5))
    n_in = int(rng.integers(1, 8))
    n_out = int(rng.integers(1, 6))
    d = Dense(n_in, n_out, rng, dtype=np.float64)
    x = rng.normal(size=(n, n_in))
    g_out = rng.normal(size=(n, n_out))
    d.forward(x)
    grad_x = d.backward(g_out)

    def f_w(w):
        return float(np.sum((x @ w + d.b.value) * g_out))

    assert rel_error(grad_x, g_out @ d.w.value.T) < 1e-12
    assert rel_error(d.w.grad, numeric_grad(f_w, d.w.value)) < GRAD_TOL
    assert rel_error(d.b.grad, g_out.sum(axis=0)) < 1e-12


def test_dense_accumulates_gradients_across_calls():
    rng = np.random.default_rng(5)
    d = Dense(3, 2, rng, dtype=np.float64)
    x = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, 2))
    d.forward(x)
    d.backward(g)
    first = d.w.grad.copy()
    d.forward(x)
    d.backward(g)
    np.testing.assert_allclose(d.w.grad, 2 * first)
    d.clear_grads()
    assert d.w.grad is None and d.b.grad is None


def test_dense_zero_init_starts_at_zero_logits():
    d = Dense(10, 3, np.random.default_rng(0), init="zero")
    assert not d.w.value.any()
    out = d.forward(np.ones((2, 10), dtype=np.float32))
    assert not out.any()


def test_relu_layer_masks_backward():
    x = np.array([[-1.0, 2.0], [3.0, -4.0]])
    act = ReLU()
    out = act.forward(x)
    np.testing.assert_array_equal(out, [[0, 2], [3, 0]])
    grad = act.backward(np.ones_like(x))
    np.testing.assert_array_equal(grad, [[0, 1], [1, 0]])


def test_relu_function():
    np.testing.assert_array_equal(relu(np.array([-2.0, 0.0, 3.0])), [0, 0, 3])


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 3))
    p = softmax(x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(x + 100.0), p, atol=1e-12)
    assert np.isfinite(softmax(np.array([1e4, 0.0, -1e4]))).all()


def test_dropout_inference_is_identity():
    x = np.ones((4, 4))
    out, mask = dropout(x, 0.5, training=False)
    assert out is x and mask is None
    out, mask = dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
    assert out is x and mask is None


def test_dropout_training_scales_survivors():
    rng = np.random.default_rng(7)
    x = np.ones((100, 100))
    out, mask = dropout(x, 0.5, training=True, rng=rng)
    surviving = out[mask.astype(bool)]
    np.testing.assert_allclose(surviving, 2.0)
    # survival rate close to 1 - ratio
    assert abs(mask.mean() - 0.5) < 0.05
    # expectation preserved
    assert abs(out.mean() - 1.0) < 0.1


def test_dropout_backward_reuses_mask():
    rng = np.random.default_rng(8)
    x = np.ones((10, 10))
    _, mask = dropout(x, 0.3, training=True, rng=rng)
    g = dropout_backward(np.ones_like(x), mask, 0.3)
    np.testing.assert_allclose(g, mask / 0.7)
    assert dropout_backward(x, None, 0.3) is x


def test_dropout_rejects_bad_ratio():
    with pytest.raises(ValueError):
        dropout(np.ones(3), 1.0, training=True, rng=np.random.default_rng(0))


def test_lstm_forget_bias_starts_at_one():
    cell = LstmCell(4, 6, np.random.default_rng(0))
    np.testing.assert_array_equal(cell.b.value[6:12], 1.0)
    assert not cell.b.value[:6].any() and not cell.b.value[12:].any()


@pytest.mark.parametrize("trial", range(20))
def test_lstm_gradients_over_window(trial):
    rng = np.random.default_rng(5000 + trial)
    n_in = int(rng.integers(1, 5))
    n_h = int(rng.integers(1, 5))
    batch = int(rng.integers(1, 3))
    t_steps = 3
    cell = LstmCell(n_in, n_h, rng, dtype=np.float64)
    xs = rng.normal(size=(t_steps, batch, n_in))
    g_hs = rng.normal(size=(t_steps, batch, n_h))

    def run(xs_, wx, wh, b):
        wx0, wh0, b0 = cell.wx.value, cell.wh.value, cell.b.value
        cell.wx.value, cell.wh.value, cell.b.value = wx, wh, b
        h, c = cell.initial_state(batch)
        total = 0.0
        for t in range(t_steps):
            h, c, _ = cell.step(xs_[t], h, c)
            total += float(np.sum(h * g_hs[t]))
        cell.wx.value, cell.wh.value, cell.b.value = wx0, wh0, b0
        return total

    h, c = cell.initial_state(batch)
    caches = []
    for t in range(t_steps):
        h, c, cache = cell.step(xs[t], h, c)
        caches.append(cache)
    cell.clear_grads()
    grad_xs = cell.backward_window(caches, list(g_hs))

    wx, wh, b = cell.wx.value, cell.wh.value, cell.b.value
    num_wx = numeric_grad(lambda a: run(xs, a, wh, b), wx)
    num_wh = numeric_grad(lambda a: run(xs, wx, a, b), wh)
    num_b = numeric_grad(lambda a: run(xs, wx, wh, a), b)
    num_x = numeric_grad(lambda a: run(a, wx, wh, b), xs)
    assert rel_error(cell.wx.grad, num_wx) < GRAD_TOL
    assert rel_error(cell.wh.grad, num_wh) < GRAD_TOL
    assert rel_error(cell.b.grad, num_b) < GRAD_TOL
    assert rel_error(np.stack(grad_xs), num_x) < GRAD_TOL
