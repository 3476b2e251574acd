"""Layer forward/backward passes: conv, max-pool, dense, ReLU, softmax, dropout, LSTM.

Every layer supports a leading batch axis; rank-3 image inputs (H, W, C) and
rank-1 vector inputs are promoted to a batch of one. Backward passes are
hand-derived and cache whatever the forward needed. Parameters live in
``Param`` objects so the optimizer can walk a flat list.
"""

import numpy as np

from .tensor import ShapeError


class Param:
    """A named parameter array plus its latest gradient."""

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name, value, frozen=False):
        self.name = name
        self.value = value
        self.grad = None
        self.frozen = frozen

    @property
    def size(self):
        return self.value.size


def he_uniform(rng, fan_in, shape, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def glorot_uniform(rng, fan_in, fan_out, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def relu(x):
    return np.maximum(x, 0)


def softmax(x):
    """Row-wise softmax with max-subtraction for stability."""
    x = np.asarray(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def dropout(x, ratio, training, rng=None):
    """Inverted dropout: identity at inference, 1/(1-ratio) scaling at train time."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not training or ratio == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= ratio).astype(x.dtype)
    return x * mask / (1.0 - ratio), mask


def dropout_backward(grad, mask, ratio):
    if mask is None:
        return grad
    return grad * mask / (1.0 - ratio)


def _batched(x, rank):
    """Promote to a batch of one if x has the un-batched rank."""
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1}, got rank {x.ndim}")


def _im2col3x3(x, out=None):
    """(N, H, W, C) -> (N*H*W, 9C) patch matrix for a 3x3 kernel with zero pad 1.

    Taps are ordered (ky, kx, c). Padding is fused: each tap is one shifted
    contiguous slice copy plus zeroed border strips, and ``out`` lets callers
    reuse the (large) column buffer across batches.
    """
    n, h, w, c = x.shape
    if out is None or out.shape != (n * h * w, 9 * c) or out.dtype != x.dtype:
        out = np.empty((n * h * w, 9 * c), dtype=x.dtype)
    cols = out.reshape(n, h, w, 9, c)
    for ky in range(3):
        dy = ky - 1
        y0, y1 = max(0, -dy), h - max(0, dy)
        for kx in range(3):
            dx = kx - 1
            x0, x1 = max(0, -dx), w - max(0, dx)
            tap = cols[:, :, :, ky * 3 + kx, :]
            if y0:
                tap[:, :y0] = 0
            if y1 < h:
                tap[:, y1:] = 0
            if x0:
                tap[:, y0:y1, :x0] = 0
            if x1 < w:
                tap[:, y0:y1, x1:] = 0
            tap[:, y0:y1, x0:x1] = x[:, y0 + dy : y1 + dy, x0 + dx : x1 + dx, :]
    return out


class Conv2d:
    """3x3 convolution (cross-correlation), stride 1, zero padding 1.

    Output spatial size always equals input spatial size.
    """

    def __init__(self, in_channels, filters, rng=None, dtype=np.float32, frozen=False,
                 need_input_grad=True):
        self.in_channels = in_channels
        self.filters = filters
        self.dtype = dtype
        self.need_input_grad = need_input_grad
        if rng is None:
            w = np.zeros((3, 3, in_channels, filters), dtype=dtype)
        else:
            w = he_uniform(rng, 9 * in_channels, (3, 3, in_channels, filters), dtype)
        self.w = Param("conv_w", w, frozen)
        self.b = Param("conv_b", np.zeros(filters, dtype=dtype), frozen)
        self._cache = None
        self._cols = None  # reused column buffer
        self._gcols = None

    def forward(self, x, keep_cache=True):
        x, squeeze = _batched(x, 3)
        n, h, w, c = x.shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        self._cols = _im2col3x3(x, self._cols if keep_cache else None)
        cols = self._cols
        wm = self.w.value.reshape(9 * self.in_channels, self.filters)
        out = cols @ wm
        out += self.b.value
        out = out.reshape(n, h, w, self.filters)
        if keep_cache:
            self._cache = (cols, (n, h, w, c))
        else:
            self._cols = None
        return out[0] if squeeze else out

    def backward(self, grad_out):
        cols, (n, h, w, c) = self._cache
        grad_out, squeeze = _batched(grad_out, 3)
        g = grad_out.reshape(n * h * w, self.filters)
        if not self.w.frozen:
            self.w.grad = (cols.T @ g).reshape(self.w.value.shape)
            self.b.grad = g.sum(axis=0)
        if not self.need_input_grad:
            return None
        # grad wrt input: correlate grad_out with the 180deg-flipped kernel,
        # in/out channels swapped
        wa = self.w.value[::-1, ::-1].transpose(0, 1, 3, 2)
        self._gcols = _im2col3x3(grad_out, self._gcols)
        grad_x = (self._gcols @ np.ascontiguousarray(wa.reshape(9 * self.filters, c))).reshape(
            n, h, w, c
        )
        return grad_x[0] if squeeze else grad_x

    def params(self):
        return [self.w, self.b]


class MaxPool2d:
    """2x2 max pooling, stride 2. Argmax ties go to the first element in row-major scan."""

    def __init__(self):
        self._cache = None

    def forward(self, x, keep_cache=True):
        x, squeeze = _batched(x, 3)
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2d needs even spatial extents, got {h}x{w}")
        r = x.reshape(n, h // 2, 2, w // 2, 2, c)
        out = np.maximum(np.maximum(r[:, :, 0, :, 0], r[:, :, 0, :, 1]),
                         np.maximum(r[:, :, 1, :, 0], r[:, :, 1, :, 1]))
        if keep_cache:
            # first row-major window position attaining the max
            windows = np.stack(
                [r[:, :, 0, :, 0], r[:, :, 0, :, 1], r[:, :, 1, :, 0], r[:, :, 1, :, 1]],
                axis=3,
            )
            arg = (windows == out[:, :, :, None, :]).argmax(axis=3)
            self._cache = (arg, (n, h, w, c))
        return out[0] if squeeze else out

    def backward(self, grad_out):
        arg, (n, h, w, c) = self._cache
        grad_out, squeeze = _batched(grad_out, 3)
        scatter = np.zeros((n, h // 2, w // 2, 4, c), dtype=grad_out.dtype)
        np.put_along_axis(scatter, arg[:, :, :, None, :], grad_out[:, :, :, None, :], axis=3)
        grad_x = scatter.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        grad_x = grad_x.reshape(n, h, w, c)
        return grad_x[0] if squeeze else grad_x

    def params(self):
        return []


class Dense:
    """Affine map x @ W + b."""

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, init="he", name="dense"):
        self.n_in = n_in
        self.n_out = n_out
        self.dtype = dtype
        if rng is None or init == "zero":
            # zero start keeps initial logits unsaturated regardless of input scale
            w = np.zeros((n_in, n_out), dtype=dtype)
        elif init == "he":
            w = he_uniform(rng, n_in, (n_in, n_out), dtype)
        else:
            w = glorot_uniform(rng, n_in, n_out, (n_in, n_out), dtype)
        self.w = Param(f"{name}_w", w)
        self.b = Param(f"{name}_b", np.zeros(n_out, dtype=dtype))
        self._cache = None

    def forward(self, x, keep_cache=True):
        x, squeeze = _batched(x, 1)
        if x.shape[1] != self.n_in:
            raise ShapeError(f"expected {self.n_in} inputs, got {x.shape[1]}")
        out = x @ self.w.value + self.b.value
        if keep_cache:
            self._cache = x
        return out[0] if squeeze else out

    def backward(self, grad_out):
        x = self._cache
        grad_out, squeeze = _batched(grad_out, 1)
        gw = x.T @ grad_out
        gb = grad_out.sum(axis=0)
        self.w.grad = self.w.grad + gw if self.w.grad is not None else gw
        self.b.grad = self.b.grad + gb if self.b.grad is not None else gb
        grad_x = grad_out @ self.w.value.T
        return grad_x[0] if squeeze else grad_x

    def clear_grads(self):
        self.w.grad = None
        self.b.grad = None

    def params(self):
        return [self.w, self.b]


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x, keep_cache=True):
        if keep_cache:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        return grad_out * self._mask

    def params(self):
        return []


class LstmCell:
    """Standard LSTM without peepholes; gates ordered (input, forget, candidate, output).

    Forget-gate bias starts at 1.0. Kernels are Glorot-uniform.
    """

    def __init__(self, n_in, n_h, rng=None, dtype=np.float32):
        self.n_in = n_in
        self.n_h = n_h
        self.dtype = dtype
        if rng is None:
            wx = np.zeros((n_in, 4 * n_h), dtype=dtype)
            wh = np.zeros((n_h, 4 * n_h), dtype=dtype)
        else:
            wx = glorot_uniform(rng, n_in, n_h, (n_in, 4 * n_h), dtype)
            wh = glorot_uniform(rng, n_h, n_h, (n_h, 4 * n_h), dtype)
        b = np.zeros(4 * n_h, dtype=dtype)
        b[n_h : 2 * n_h] = 1.0
        self.wx = Param("lstm_wx", wx)
        self.wh = Param("lstm_wh", wh)
        self.b = Param("lstm_b", b)

    def initial_state(self, batch=1):
        z = np.zeros((batch, self.n_h), dtype=self.dtype)
        return z, z.copy()

    def step(self, x, h, c):
        """One time step over a batch; returns (h_next, c_next, cache)."""
        n = self.n_h
        z = x @ self.wx.value + h @ self.wh.value + self.b.value
        i = _sigmoid(z[:, :n])
        f = _sigmoid(z[:, n : 2 * n])
        g = np.tanh(z[:, 2 * n : 3 * n])
        o = _sigmoid(z[:, 3 * n :])
        c_next = f * c + i * g
        tc = np.tanh(c_next)
        h_next = o * tc
        cache = (x, h, c, i, f, g, o, tc)
        return h_next, c_next, cache

    def backward_window(self, caches, grad_hs):
        """Backprop through a window of T cached steps.

        grad_hs[t] is the loss gradient wrt h_t from that step's output head.
        Accumulates parameter gradients and returns per-step input gradients.
        """
        n = self.n_h
        t_steps = len(caches)
        batch = grad_hs[0].shape[0]
        gwx = np.zeros_like(self.wx.value)
        gwh = np.zeros_like(self.wh.value)
        gb = np.zeros_like(self.b.value)
        grad_xs = [None] * t_steps
        dh = np.zeros((batch, n), dtype=grad_hs[0].dtype)
        dc = np.zeros_like(dh)
        for t in range(t_steps - 1, -1, -1):
            x, h_prev, c_prev, i, f, g, o, tc = caches[t]
            dh = dh + grad_hs[t]
            do = dh * tc
            dc = dc + dh * o * (1 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)],
                axis=1,
            )
            gwx += x.T @ dz
            gwh += h_prev.T @ dz
            gb += dz.sum(axis=0)
            grad_xs[t] = dz @ self.wx.value.T
            dh = dz @ self.wh.value.T
            dc = dc * f
        self.wx.grad = self.wx.grad + gwx if self.wx.grad is not None else gwx
        self.wh.grad = self.wh.grad + gwh if self.wh.grad is not None else gwh
        self.b.grad = self.b.grad + gb if self.b.grad is not None else gb
        return grad_xs

    def clear_grads(self):
        self.wx.grad = None
        self.wh.grad = None
        self.b.grad = None

    def params(self):
        return [self.wx, self.wh, self.b]


def _sigmoid(x):
    # clamp to keep exp from overflowing on saturated inputs
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
