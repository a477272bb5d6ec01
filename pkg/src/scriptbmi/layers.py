"""Forward and backward passes for the layers of the character CNN.

Functional kernels return ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. The layer classes at the
bottom wrap them with parameter/gradient storage for :class:`~scriptbmi.model.Network`.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import RangeError, ShapeError
from .tensor import DTYPE, RngStream, as_tensor, rng_normal

KERNEL = 3
POOL = 2


# -- convolution -----------------------------------------------------------

def _check_conv(x, weight, bias):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B, C, H, W), got {x.shape}")
    if weight.ndim != 4 or weight.shape[2:] != (KERNEL, KERNEL):
        raise ShapeError(f"conv weights must be (Cout, Cin, 3, 3), got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} kernels")


def im2col(x: np.ndarray) -> np.ndarray:
    """Rows are (b, i, j) output positions; columns are (ki, kj, c) taps.

    Built from a channels-last copy so the inner copy runs over contiguous
    channels.
    """
    B, C, H, W = x.shape
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, KERNEL * KERNEL * C)


def col2im(cols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add tap columns back to (B, C, H, W)."""
    B, C, H, W = shape
    taps = cols.reshape(B, H, W, KERNEL, KERNEL, C)
    out = np.zeros((B, H + 2, W + 2, C), dtype=DTYPE)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            out[:, ki:ki + H, kj:kj + W, :] += taps[:, :, :, ki, kj, :]
    return np.ascontiguousarray(out[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2))


def _weight_matrix(weight):
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def conv2d_forward(x, weight, bias):
    """Stride-1, zero-padded 'same' 3x3 convolution (cross-correlation)."""
    x = as_tensor(x)
    _check_conv(x, weight, bias)
    B, _, H, W = x.shape
    cout = weight.shape[0]
    cols = im2col(x)
    out = cols @ _weight_matrix(weight).T + bias
    out = np.ascontiguousarray(out.reshape(B, H, W, cout).transpose(0, 3, 1, 2))
    return out, (x.shape, cols, weight)


def conv2d_backward(grad_out, cache):
    in_shape, cols, weight = cache
    B, _, H, W = in_shape
    cout = weight.shape[0]
    if grad_out.shape != (B, cout, H, W):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(B, cout, H, W)}")
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, cout)
    wmat = _weight_matrix(weight)
    grad_w = (g.T @ cols).reshape(cout, KERNEL, KERNEL, -1).transpose(0, 3, 1, 2)
    grad_b = g.sum(axis=0)
    grad_x = col2im(g @ wmat, in_shape)
    return grad_x, np.ascontiguousarray(grad_w), grad_b


def conv2d_direct(x, weight, bias):
    """Loop-over-taps reference convolution used to cross-check im2col."""
    x = as_tensor(x)
    _check_conv(x, weight, bias)
    B, _, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.empty((B, weight.shape[0], H, W), dtype=DTYPE)
    out[...] = bias[None, :, None, None]
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            patch = xp[:, :, ki:ki + H, kj:kj + W]
            out += np.einsum("bchw,oc->bohw", patch, weight[:, :, ki, kj])
    return out


# -- pooling -----------------------------------------------------------------

def _pool_taps(x, h2, w2):
    # window order (0,0), (0,1), (1,0), (1,1) is row-major
    return [x[:, :, di:2 * h2:2, dj:2 * w2:2] for di in (0, 1) for dj in (0, 1)]


def maxpool_forward(x):
    """2x2 stride-2 max pooling; odd trailing rows/columns are dropped.

    The cache holds the row-major window index of the first maximum.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if H < POOL or W < POOL:
        raise ShapeError(f"maxpool needs H, W >= 2, got {H}x{W}")
    h2, w2 = H // POOL, W // POOL
    a, b, c, d = _pool_taps(x, h2, w2)
    out = np.maximum(np.maximum(a, b), np.maximum(c, d))
    idx = np.where(a == out, 0, np.where(b == out, 1, np.where(c == out, 2, 3))).astype(np.int8)
    return out, (x.shape, idx)


def maxpool_backward(grad_out, cache):
    in_shape, idx = cache
    if grad_out.shape != idx.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != pooled shape {idx.shape}")
    h2, w2 = idx.shape[2:]
    grad_x = np.zeros(in_shape, dtype=DTYPE)
    for k, tap in enumerate(_pool_taps(grad_x, h2, w2)):
        tap[...] = np.where(idx == k, grad_out, 0.0)
    return grad_x


# -- elementwise ---------------------------------------------------------------

def relu_forward(x):
    x = as_tensor(x)
    return np.maximum(x, 0.0), x > 0


def relu_backward(grad_out, cache):
    if grad_out.shape != cache.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != cached {cache.shape}")
    return np.where(cache, grad_out, 0.0)


def dropout_forward(x, rate: float, training: bool, stream: RngStream | None = None):
    """Inverted dropout. Returns ``(output, mask)``; mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise RangeError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x, None
    if stream is None:
        raise ValueError("training-mode dropout needs an RngStream")
    mask = (stream.generator().random(x.shape) >= rate).astype(DTYPE)
    return (mask * x) / (1.0 - rate), mask


def dropout_backward(grad_out, mask, rate: float):
    if mask is None:
        return grad_out
    if grad_out.shape != mask.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != mask {mask.shape}")
    return (mask * grad_out) / (1.0 - rate)


def flatten(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"flatten expects (B, C, H, W), got {x.shape}")
    return x.reshape(x.shape[0], -1)


def unflatten(x, shape):
    return x.reshape((x.shape[0],) + tuple(shape))


# -- dense ---------------------------------------------------------------------

def dense_forward(x, weight, bias):
    x = as_tensor(x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense input {x.shape} incompatible with weights {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} units")
    return x @ weight.T + bias, (x, weight)


def dense_backward(grad_out, cache):
    x, weight = cache
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(x.shape[0], weight.shape[0])}")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits):
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def he_init(shape, fan_in: int, stream: RngStream) -> np.ndarray:
    if fan_in < 1:
        raise RangeError(f"fan_in must be >= 1, got {fan_in}")
    return rng_normal(stream, shape, 0.0, float(np.sqrt(2.0 / fan_in)))


# -- layer objects ---------------------------------------------------------------

class Layer:
    """Base class: stateless layers have empty ``params``."""

    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class Conv2D(Layer):
    def __init__(self, in_channels, out_channels, name="conv"):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.name = name
        self.params = {
            "weight": np.zeros((out_channels, in_channels, KERNEL, KERNEL), dtype=DTYPE),
            "bias": np.zeros(out_channels, dtype=DTYPE),
        }

    def initialize(self, stream: RngStream):
        fan_in = self.in_channels * KERNEL * KERNEL
        self.params["weight"] = he_init(self.params["weight"].shape, fan_in, stream)
        self.params["bias"] = np.zeros(self.out_channels, dtype=DTYPE)

    def forward(self, x, training=False):
        out, self._cache = conv2d_forward(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(grad, self._cache)
        self.grads = {"weight": gw, "bias": gb}
        return gx

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        return (self.out_channels, h, w)


class MaxPool2D(Layer):
    def __init__(self, name="pool"):
        super().__init__()
        self.name = name

    def forward(self, x, training=False):
        out, self._cache = maxpool_forward(x)
        return out

    def backward(self, grad):
        return maxpool_backward(grad, self._cache)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h < POOL or w < POOL:
            raise ShapeError(f"{self.name}: input {h}x{w} too small to pool")
        return (c, h // POOL, w // POOL)


class ReLU(Layer):
    def __init__(self, name="relu"):
        super().__init__()
        self.name = name

    def forward(self, x, training=False):
        out, self._cache = relu_forward(x)
        return out

    def backward(self, grad):
        return relu_backward(grad, self._cache)


class Dropout(Layer):
    def __init__(self, rate, name="dropout"):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise RangeError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.name = name
        self.stream: RngStream | None = None

    def forward(self, x, training=False):
        out, self._cache = dropout_forward(x, self.rate, training, self.stream)
        return out

    def backward(self, grad):
        return dropout_backward(grad, self._cache, self.rate)


class Flatten(Layer):
    def __init__(self, name="flatten"):
        super().__init__()
        self.name = name

    def forward(self, x, training=False):
        self._cache = x.shape[1:]
        return flatten(x)

    def backward(self, grad):
        return unflatten(grad, self._cache)

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Dense(Layer):
    def __init__(self, in_units, out_units, name="dense"):
        super().__init__()
        self.in_units = in_units
        self.out_units = out_units
        self.name = name
        self.params = {
            "weight": np.zeros((out_units, in_units), dtype=DTYPE),
            "bias": np.zeros(out_units, dtype=DTYPE),
        }

    def initialize(self, stream: RngStream):
        self.params["weight"] = he_init((self.out_units, self.in_units), self.in_units, stream)
        self.params["bias"] = np.zeros(self.out_units, dtype=DTYPE)

    def forward(self, x, training=False):
        out, self._cache = dense_forward(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, grad):
        gx, gw, gb = dense_backward(grad, self._cache)
        self.grads = {"weight": gw, "bias": gb}
        return gx

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_units,):
            raise ShapeError(f"{self.name}: expected ({self.in_units},), got {tuple(in_shape)}")
        return (self.out_units,)
