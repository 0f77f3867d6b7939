"""Layer kernels for the built-in engine.

Activations are NHWC for spatial tensors and (N, D) for flat ones.  Every
layer caches what its backward pass needs during ``forward``; a layer is
therefore not reentrant across interleaved batches.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def sigmoid(x, slope: float = 1.0):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-slope * x[pos]))
    ex = np.exp(slope * x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(name: str, v):
    if name == "relu":
        return np.maximum(v, 0)
    if name == "tanh":
        return np.tanh(v)
    if name == "sigmoid":
        return sigmoid(v)
    if name in ("linear", None):
        return v
    raise ValueError(f"unsupported activation {name!r}")


def activation_grad(name: str, y, dy):
    """dL/dv given the activation output y = phi(v) and dL/dy."""
    if name == "relu":
        return dy * (y > 0)
    if name == "tanh":
        return dy * (1 - y * y)
    if name == "sigmoid":
        return dy * y * (1 - y)
    return dy


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def init_limit(activation: str, fan_in: int, fan_out: int) -> float:
    if activation == "relu":
        return math.sqrt(6.0 / fan_in)
    return math.sqrt(6.0 / (fan_in + fan_out))


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """(output size, pad before, pad after) for same padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def output_shape(self, shapes: list[tuple]) -> tuple:
        raise NotImplementedError

    def forward(self, inputs: list[np.ndarray], training: bool, rng) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def _dropout_mask(rng, shape, rate, dtype):
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / dtype(keep)


class Conv2D(Layer):
    """Same-padded 2-D convolution with activation and optional trailing dropout."""

    kind = "conv2d"

    def __init__(self, in_shape, filters, kernel_size, stride=1, activation="relu", dropout=0.0,
                 rng=None, dtype=np.float32):
        super().__init__()
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d expects a spatial input, got shape {in_shape}")
        self.in_shape = tuple(in_shape)
        self.filters = int(filters)
        self.k = int(kernel_size)
        self.stride = int(stride)
        self.activation = activation
        self.dropout = float(dropout)
        channels = self.in_shape[2]
        fan_in = self.k * self.k * channels
        fan_out = self.k * self.k * self.filters
        limit = init_limit(activation, fan_in, fan_out)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = rng.uniform(-limit, limit, (fan_in, self.filters)).astype(dtype)
        self.params["b"] = np.zeros(self.filters, dtype=dtype)

    def output_shape(self, shapes):
        (h, w, _), = shapes
        oh, _, _ = same_padding(h, self.k, self.stride)
        ow, _, _ = same_padding(w, self.k, self.stride)
        return (oh, ow, self.filters)

    def forward(self, inputs, training, rng):
        x, = inputs
        n, h, w, c = x.shape
        oh, pt, pb = same_padding(h, self.k, self.stride)
        ow, pl, pr = same_padding(w, self.k, self.stride)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x
        win = sliding_window_view(xp, (self.k, self.k), axis=(1, 2))[:, ::self.stride, ::self.stride]
        # (n, oh, ow, c, kh, kw) -> (n, oh, ow, kh, kw, c)
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, self.k * self.k * c)
        v = cols @ self.params["W"] + self.params["b"]
        y = activate(self.activation, v)
        self._cache = (x.shape, xp.shape, (pt, pl), cols, y, (oh, ow))
        self._mask = None
        if training and self.dropout > 0:
            self._mask = _dropout_mask(rng, y.shape, self.dropout, y.dtype.type)
            y = y * self._mask
        return y.reshape(n, oh, ow, self.filters)

    def backward(self, dout):
        x_shape, xp_shape, (pt, pl), cols, y, (oh, ow) = self._cache
        n, h, w, c = x_shape
        d = dout.reshape(-1, self.filters)
        if self._mask is not None:
            d = d * self._mask
        d = activation_grad(self.activation, y, d)
        self.grads["W"] = cols.T @ d
        self.grads["b"] = d.sum(axis=0)
        dcols = (d @ self.params["W"].T).reshape(n, oh, ow, self.k, self.k, c)
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        s = self.stride
        for i in range(self.k):
            for j in range(self.k):
                dxp[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
        return [dxp[:, pt:pt + h, pl:pl + w, :]]


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_shape, units, activation="relu", dropout=0.0, rng=None, dtype=np.float32):
        super().__init__()
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got shape {in_shape}")
        self.units = int(units)
        self.activation = activation
        self.dropout = float(dropout)
        fan_in = in_shape[0]
        limit = init_limit(activation, fan_in, self.units)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = rng.uniform(-limit, limit, (fan_in, self.units)).astype(dtype)
        self.params["b"] = np.zeros(self.units, dtype=dtype)

    def output_shape(self, shapes):
        return (self.units,)

    def forward(self, inputs, training, rng):
        x, = inputs
        # u = W x ; v = u + b ; y = phi(v)
        v = x @ self.params["W"] + self.params["b"]
        y = activate(self.activation, v)
        self._cache = (x, y)
        self._mask = None
        if training and self.dropout > 0:
            self._mask = _dropout_mask(rng, y.shape, self.dropout, y.dtype.type)
            y = y * self._mask
        return y

    def backward(self, dout):
        x, y = self._cache
        if self._mask is not None:
            dout = dout * self._mask
        d = activation_grad(self.activation, y, dout)
        self.grads["W"] = x.T @ d
        self.grads["b"] = d.sum(axis=0)
        return [d @ self.params["W"].T]


class OutputDense(Dense):
    """Final dense layer; emits logits, softmax is applied by the network."""

    kind = "output-dense"

    def __init__(self, in_shape, units, rng=None, dtype=np.float32):
        super().__init__(in_shape, units, activation="linear", rng=rng, dtype=dtype)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shapes):
        (shape,) = shapes
        return (int(np.prod(shape)),)

    def forward(self, inputs, training, rng):
        x, = inputs
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return [dout.reshape(self._shape)]


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        self.rate = float(rate)

    def output_shape(self, shapes):
        return shapes[0]

    def forward(self, inputs, training, rng):
        x, = inputs
        self._mask = None
        if not training or self.rate == 0:
            return x
        self._mask = _dropout_mask(rng, x.shape, self.rate, x.dtype.type)
        return x * self._mask

    def backward(self, dout):
        return [dout if self._mask is None else dout * self._mask]


def _bins(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, -(-((i + 1) * size) // out)) for i in range(out)]


def adaptive_max_pool(x, oh: int, ow: int):
    """Max-pool NHWC ``x`` down to (oh, ow).

    Returns the pooled map and, per output cell, the flat in-window argmax
    (windows may overlap, so a single global mask would be ambiguous).
    """
    n, h, w, c = x.shape
    if (h, w) == (oh, ow):
        return x, None
    out = np.empty((n, oh, ow, c), dtype=x.dtype)
    argmax = {}
    for i, (h0, h1) in enumerate(_bins(h, oh)):
        for j, (w0, w1) in enumerate(_bins(w, ow)):
            patch = x[:, h0:h1, w0:w1, :].reshape(n, -1, c)
            idx = patch.argmax(axis=1)
            out[:, i, j, :] = np.take_along_axis(patch, idx[:, None, :], axis=1)[:, 0, :]
            argmax[i, j] = idx
    return out, argmax


def adaptive_max_pool_backward(dout, argmax, in_shape):
    n, h, w, c = in_shape
    _, oh, ow, _ = dout.shape
    dx = np.zeros(in_shape, dtype=dout.dtype)
    rows, chans = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    for i, (h0, h1) in enumerate(_bins(h, oh)):
        for j, (w0, w1) in enumerate(_bins(w, ow)):
            ph, pw = np.divmod(argmax[i, j], w1 - w0)
            np.add.at(dx, (rows, h0 + ph, w0 + pw, chans), dout[:, i, j, :])
    return dx


class MergeConcat(Layer):
    """Concatenate two inputs on the channel (or feature) axis.

    Spatial inputs of different sizes are reconciled by max-pooling the larger
    map down to the smaller one first.
    """

    kind = "merge-concat"

    def output_shape(self, shapes):
        a, b = shapes
        if len(a) != len(b):
            raise ShapeError(f"merge of mixed ranks {a} and {b}")
        if len(a) == 1:
            return (a[0] + b[0],)
        return (min(a[0], b[0]), min(a[1], b[1]), a[2] + b[2])

    def forward(self, inputs, training, rng):
        a, b = inputs
        if a.ndim == 2:
            self._split = a.shape[1]
            self._pool = None
            return np.concatenate([a, b], axis=1)
        oh, ow = min(a.shape[1], b.shape[1]), min(a.shape[2], b.shape[2])
        pa, ma = adaptive_max_pool(a, oh, ow)
        pb, mb = adaptive_max_pool(b, oh, ow)
        self._pool = ((ma, a.shape), (mb, b.shape))
        self._split = a.shape[3]
        return np.concatenate([pa, pb], axis=3)

    def backward(self, dout):
        if self._pool is None:
            return [dout[:, :self._split], dout[:, self._split:]]
        da, db = dout[..., :self._split], dout[..., self._split:]
        grads = []
        for d, (mask, shape) in zip((da, db), self._pool):
            grads.append(d if mask is None else adaptive_max_pool_backward(d, mask, shape))
        return grads
