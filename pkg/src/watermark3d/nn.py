"""Small NCHW array kernels with hand-written backward passes.

Only what the confidence-map network needs: same-padded stride-1
convolution, ReLU, 2x2 max pooling, mean squared error and Adam.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError

# bytes of im2col scratch per chunk
_COLS_BUDGET = 48 * 2**20


class Param:
    """A learnable array with a gradient slot of the same shape."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class ConvLayer:
    """Stride-1 convolution with zero padding (k - 1) / 2 on each side."""

    def __init__(self, in_channels, out_channels, kernel_size, rng=None, dtype=np.float32):
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        rng = np.random.default_rng(0) if rng is None else rng
        # He-style initialisation
        scale = np.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
        w = rng.standard_normal((out_channels, in_channels, kernel_size, kernel_size)) * scale
        self.weight = Param(w.astype(dtype))
        self.bias = Param(np.zeros(out_channels, dtype=dtype))

    @property
    def params(self):
        return [self.weight, self.bias]

    def astype(self, dtype):
        self.weight.value = self.weight.value.astype(dtype)
        self.bias.value = self.bias.value.astype(dtype)
        return self


def _row_chunks(n, w, c, k, itemsize, height):
    per_row = max(n * w * c * k * k * itemsize, 1)
    rows = max(1, min(height, _COLS_BUDGET // per_row))
    return range(0, height, rows), rows


def _im2col_rows(xp, k, r0, rows):
    """Patches for output rows r0..r0+rows of the padded input, (N*rows*W, C*k*k)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp[:, :, r0:r0 + rows + k - 1], (k, k), axis=(2, 3))
    _, _, h, w, _, _ = win.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k), h, w


def _conv(x, weight, bias):
    n, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    if c != ci:
        raise ShapeMismatchError(f"input has {c} channels, layer expects {ci}")
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    wmat = weight.reshape(o, -1).T
    out = np.empty((n, h, w, o), dtype=np.result_type(x, weight))
    starts, rows = _row_chunks(n, w, c, k, x.itemsize, h)
    for r0 in starts:
        cols, hh, _ = _im2col_rows(xp, k, r0, rows)
        out[:, r0:r0 + hh] = (cols @ wmat).reshape(n, hh, w, o)
    if bias is not None:
        out += bias
    return out.transpose(0, 3, 1, 2)


def conv2d_forward(x, layer):
    """out[b, o, i, j] = bias[o] + sum over the zero-padded k x k field."""
    return _conv(x, layer.weight.value, layer.bias.value)


def conv2d_backward(x, layer, upstream, need_input_grad=True):
    """Return (grad_x, grad_w, grad_b) for ``conv2d_forward(x, layer)``."""
    weight = layer.weight.value
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    if upstream.shape != (n, o, h, w):
        raise ShapeMismatchError(
            f"upstream shape {upstream.shape} does not match output {(n, o, h, w)}"
        )
    grad_b = upstream.sum(axis=(0, 2, 3))
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    up = upstream.transpose(0, 2, 3, 1)
    grad_w = np.zeros((o, c * k * k), dtype=np.result_type(x, upstream))
    starts, rows = _row_chunks(n, w, c, k, x.itemsize, h)
    for r0 in starts:
        cols, hh, _ = _im2col_rows(xp, k, r0, rows)
        grad_w += up[:, r0:r0 + hh].reshape(-1, o).T @ cols
    grad_w = grad_w.reshape(weight.shape)
    grad_x = None
    if need_input_grad:
        # transposed convolution == correlation with the flipped, channel-swapped kernel
        flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        grad_x = _conv(upstream, np.ascontiguousarray(flipped), None)
    return grad_x, grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    """Subgradient at 0 is taken as 0."""
    return upstream * (x > 0)


def maxpool2x2_forward(x):
    """2x2 max pooling, stride 2. A trailing odd row/column is cropped.

    Returns (out, argmax) where argmax indexes the window in row-major order;
    ties go to the first index.
    """
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = (x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
           .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(x_shape, argmax, upstream):
    n, c, h, w = x_shape
    h2, w2 = argmax.shape[2:]
    win = np.zeros((n, c, h2, w2, 4), dtype=upstream.dtype)
    np.put_along_axis(win, argmax[..., None], upstream[..., None], axis=-1)
    grad = np.zeros(x_shape, dtype=upstream.dtype)
    grad[:, :, :2 * h2, :2 * w2] = (win.reshape(n, c, h2, w2, 2, 2)
                                    .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2))
    return grad


def mse_loss(pred, target):
    """Mean of squared differences over every element; returns (loss, grad)."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / diff.size) * diff


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on ``params`` (arrays)."""
    if len(params) != len(grads):
        raise ShapeMismatchError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    corr1 = 1.0 - state.beta1 ** t
    corr2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeMismatchError(f"grad {g.shape} vs param {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.dtype)
    return params, state
