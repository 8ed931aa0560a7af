"""Layers with explicit forward/backward passes.

Every layer works on a leading batch axis. Image tensors are laid out
``(batch, height, width, channels)``. A layer caches what its backward pass
needs during ``forward``; calling ``backward`` without that cache raises
:class:`~lanerisk.errors.StateError`.
"""

from __future__ import annotations

import math
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, FormatError, StateError
from .tensor import activation, activation_grad, decode_tensor, encode_tensor, softmax

# Upper bound on one im2col buffer, in float64 elements (~32 MB).
_COL_BUDGET = 1 << 22
# Forward im2col buffers are kept for backward up to this many elements.
_CACHE_BUDGET = 1 << 25


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def output_shape(self, input_shape: tuple) -> tuple:
        """Per-sample output shape for a per-sample ``input_shape``."""
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def named_params(self, prefix=""):
        for name, value in self.params.items():
            yield prefix + name, value

    def named_grads(self, prefix=""):
        for name in self.params:
            yield prefix + name, self.grads[name]


def conv_output_extent(n: int, window: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-n // stride)
    if padding == "valid":
        return (n - window) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _same_pad(n: int, window: int, stride: int) -> tuple[int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + window - n, 0)
    return total // 2, total - total // 2


class Conv2D(Layer):
    """Cross-correlation with ``filters`` kernels of size ``window x window``.

    Weights are stored as ``[filters, window, window, in_channels]``.
    """

    kind = "conv2d"

    def __init__(self, in_channels, filters, window, stride=1, padding="same", rng=None):
        super().__init__()
        if min(in_channels, filters, window, stride) < 1:
            raise ValueError("in_channels, filters, window and stride must be >= 1")
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        self.in_channels = in_channels
        self.filters = filters
        self.window = window
        self.stride = stride
        self.padding = padding
        shape = (filters, window, window, in_channels)
        if rng is None:
            w = np.zeros(shape)
        else:
            w = glorot_uniform(
                rng, shape, window * window * in_channels, window * window * filters
            )
        self.params = {"W": w, "b": np.zeros(filters)}
        self.need_input_grad = True
        self._x = None
        self._cols_cache = None

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if c != self.in_channels:
            raise DimensionError(
                f"conv2d expects {self.in_channels} channels, got input {input_shape}"
            )
        return (
            conv_output_extent(h, self.window, self.stride, self.padding),
            conv_output_extent(w, self.window, self.stride, self.padding),
            self.filters,
        )

    def _pads(self, h, w):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        return _same_pad(h, self.window, self.stride), _same_pad(w, self.window, self.stride)

    def _cols(self, xp, ho, wo):
        k, s = self.window, self.stride
        win = sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
        # (B, ho, wo, C, k, k) -> (B*ho*wo, k*k*C) matching the weight layout
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * self.in_channels)

    def _chunk(self, ho, wo):
        per_image = ho * wo * self.window * self.window * self.in_channels
        return max(1, _COL_BUDGET // max(per_image, 1))

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise DimensionError(
                f"conv2d expects (B, H, W, {self.in_channels}) input, got {x.shape}"
            )
        n, h, w, _ = x.shape
        if self.padding == "valid" and (h < self.window or w < self.window):
            raise DimensionError(
                f"input {h}x{w} is smaller than the {self.window}x{self.window} window"
            )
        ho, wo, _ = self.output_shape(x.shape[1:])
        (pt, pb), (pl, pr) = self._pads(h, w)
        wmat = self.params["W"].reshape(self.filters, -1).T
        out = np.empty((n, ho, wo, self.filters))
        step = self._chunk(ho, wo)
        keep = training and n * ho * wo * wmat.shape[0] <= _CACHE_BUDGET
        self._cols_cache = [] if keep else None
        for i in range(0, n, step):
            xp = np.pad(x[i : i + step], ((0, 0), (pt, pb), (pl, pr), (0, 0)))
            cols = self._cols(xp, ho, wo)
            out[i : i + step] = (cols @ wmat).reshape(-1, ho, wo, self.filters)
            if keep:
                self._cols_cache.append(cols)
        out += self.params["b"]
        self._x = x
        return out

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("conv2d backward called before forward")
        x = self._x
        n, h, w, c = x.shape
        ho, wo, _ = self.output_shape(x.shape[1:])
        if grad_out.shape != (n, ho, wo, self.filters):
            raise DimensionError(
                f"grad_out shape {grad_out.shape} != forward output {(n, ho, wo, self.filters)}"
            )
        k, s = self.window, self.stride
        (pt, pb), (pl, pr) = self._pads(h, w)
        wmat = self.params["W"].reshape(self.filters, -1)
        # stride 1: input gradient is a correlation of the padded output
        # gradient with the spatially flipped kernel
        wflip = self.params["W"][:, ::-1, ::-1, :].transpose(1, 2, 0, 3).reshape(-1, c)
        grad_w = np.zeros_like(wmat)
        grad_in = np.zeros_like(x) if self.need_input_grad else None
        step = self._chunk(ho, wo)
        cached = self._cols_cache
        for chunk, i in enumerate(range(0, n, step)):
            g = grad_out[i : i + step]
            g2 = g.reshape(-1, self.filters)
            if cached is not None:
                cols = cached[chunk]
            else:
                xs = x[i : i + step]
                cols = self._cols(np.pad(xs, ((0, 0), (pt, pb), (pl, pr), (0, 0))), ho, wo)
            grad_w += g2.T @ cols
            if grad_in is None:
                continue
            if s == 1:
                gp = np.pad(g, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
                win = sliding_window_view(gp, (k, k), axis=(1, 2))[:, pt : pt + h, pl : pl + w]
                gcols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * self.filters)
                grad_in[i : i + step] = (gcols @ wflip).reshape(-1, h, w, c)
                continue
            gcols = (g2 @ wmat).reshape(-1, ho, wo, k, k, c)
            gp = np.zeros((len(g), h + pt + pb, w + pl + pr, c))
            for dy in range(k):
                for dx in range(k):
                    gp[:, dy : dy + (ho - 1) * s + 1 : s, dx : dx + (wo - 1) * s + 1 : s] += (
                        gcols[:, :, :, dy, dx, :]
                    )
            grad_in[i : i + step] = gp[:, pt : pt + h, pl : pl + w]
        self._cols_cache = None
        self.grads["W"] = grad_w.reshape(self.params["W"].shape)
        self.grads["b"] = grad_out.sum(axis=(0, 1, 2))
        return grad_in


class MaxPool2D(Layer):
    """Max pooling; ties resolve to the first position in row-major order."""

    kind = "maxpool"

    def __init__(self, window=2, stride=2):
        super().__init__()
        self.window = window
        self.stride = stride
        self.argmax = None
        self._in_shape = None

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if h < self.window or w < self.window:
            raise DimensionError(f"maxpool input {input_shape} smaller than window")
        return (
            (h - self.window) // self.stride + 1,
            (w - self.window) // self.stride + 1,
            c,
        )

    def _windows(self, x, ho, wo):
        k, s = self.window, self.stride
        if k == s:
            v = x[:, : ho * k, : wo * k].reshape(x.shape[0], ho, k, wo, k, x.shape[3])
            return v.transpose(0, 1, 3, 5, 2, 4).reshape(x.shape[0], ho, wo, x.shape[3], k * k)
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        return win.reshape(x.shape[0], ho, wo, x.shape[3], k * k)

    def forward(self, x, training=False):
        if x.ndim != 4:
            raise DimensionError(f"maxpool expects (B, H, W, C) input, got {x.shape}")
        ho, wo, _ = self.output_shape(x.shape[1:])
        win = self._windows(x, ho, wo)
        self.argmax = np.argmax(win, axis=-1)
        self._in_shape = x.shape
        return np.take_along_axis(win, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad_out):
        if self.argmax is None:
            raise StateError("maxpool backward called before forward")
        if grad_out.shape != self.argmax.shape:
            raise DimensionError(
                f"grad_out shape {grad_out.shape} != pooled shape {self.argmax.shape}"
            )
        n, h, w, c = self._in_shape
        k, s = self.window, self.stride
        ho, wo = self.argmax.shape[1:3]
        dy, dx = np.divmod(self.argmax, k)
        rows = np.arange(ho)[None, :, None, None] * s + dy
        cols = np.arange(wo)[None, None, :, None] * s + dx
        grad_in = np.zeros(self._in_shape)
        b_idx = np.arange(n)[:, None, None, None]
        c_idx = np.arange(c)[None, None, None, :]
        if k <= s:
            # windows are disjoint, so every target index is unique
            grad_in[b_idx, rows, cols, c_idx] = grad_out
        else:
            np.add.at(grad_in, (b_idx, rows, cols, c_idx), grad_out)
        return grad_in


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        super().__init__()
        self._in_shape = None

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        if self._in_shape is None:
            raise StateError("flatten backward called before forward")
        return grad_out.reshape(self._in_shape)


class Dense(Layer):
    """Affine map ``x @ W + b`` followed by an activation.

    ``activation`` is one of ``sigmoid``, ``tanh``, ``relu``, ``linear`` or
    ``softmax``.
    """

    kind = "dense"

    def __init__(self, n_in, n_out, activation="linear", rng=None):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ValueError("dense extents must be >= 1")
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        w = np.zeros((n_in, n_out)) if rng is None else glorot_uniform(rng, (n_in, n_out), n_in, n_out)
        self.params = {"W": w, "b": np.zeros(n_out)}
        self.need_input_grad = True
        self._x = None
        self._z = None
        self._y = None

    def output_shape(self, input_shape):
        if input_shape != (self.n_in,):
            raise DimensionError(f"dense expects ({self.n_in},) input, got {input_shape}")
        return (self.n_out,)

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"dense expects (B, {self.n_in}) input, got {x.shape}")
        z = x @ self.params["W"] + self.params["b"]
        y = softmax(z) if self.activation == "softmax" else activation(self.activation, z)
        self._x, self._z, self._y = x, z, y
        return y

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("dense backward called before forward")
        if grad_out.shape != self._y.shape:
            raise DimensionError(
                f"grad_out shape {grad_out.shape} != output shape {self._y.shape}"
            )
        y = self._y
        if self.activation == "softmax":
            gz = y * (grad_out - np.sum(grad_out * y, axis=1, keepdims=True))
        else:
            gz = grad_out * activation_grad(self.activation, y, self._z)
        self.grads["W"] = self._x.T @ gz
        self.grads["b"] = gz.sum(axis=0)
        if not self.need_input_grad:
            return None
        return gz @ self.params["W"].T


class Dropout(Layer):
    """Inverted dropout. Inference is the exact identity."""

    kind = "dropout"

    def __init__(self, p=0.2, rng=None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.mask = None

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x, training=False):
        if not training or self.p == 0.0:
            self.mask = None
            return x
        keep = self.rng.random(x.shape) >= self.p
        self.mask = keep / (1.0 - self.p)
        return x * self.mask

    def backward(self, grad_out):
        if self.mask is None:
            return grad_out
        if grad_out.shape != self.mask.shape:
            raise DimensionError(
                f"grad_out shape {grad_out.shape} != mask shape {self.mask.shape}"
            )
        return grad_out * self.mask


class TimeDistributed(Layer):
    """Apply a stack of per-frame layers with shared weights to every step.

    Input ``(B, q, ...)`` is folded to ``(B*q, ...)`` for the inner layers
    and unfolded again on the way out.
    """

    kind = "timedist"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)
        self._lead = None

    def output_shape(self, input_shape):
        q, *frame = input_shape
        shape = tuple(frame)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return (q, *shape)

    def param_count(self):
        return sum(layer.param_count() for layer in self.layers)

    def named_params(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}{i:02d}.{layer.kind}.")

    def named_grads(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_grads(f"{prefix}{i:02d}.{layer.kind}.")

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def forward(self, x, training=False):
        if x.ndim < 3:
            raise DimensionError(f"time-distributed input needs (B, q, ...), got {x.shape}")
        self._lead = x.shape[:2]
        h = x.reshape(-1, *x.shape[2:])
        for layer in self.layers:
            h = layer.forward(h, training=training)
        return h.reshape(*self._lead, *h.shape[1:])

    def backward(self, grad_out):
        if self._lead is None:
            raise StateError("time-distributed backward called before forward")
        g = grad_out.reshape(-1, *grad_out.shape[2:])
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                return None
        return g.reshape(*self._lead, *g.shape[1:])


# -- checkpoints ------------------------------------------------------------


def encode_checkpoint(named_tensors) -> bytes:
    """Serialize ``(name, tensor)`` pairs: u32 name length, UTF-8 name, TNSR blob."""
    parts = []
    for name, arr in named_tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(encode_tensor(arr, 2))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    while pos < len(buf):
        if len(buf) - pos < 4:
            raise FormatError("truncated record name length", pos)
        (length,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) - pos < length:
            raise FormatError("truncated record name", pos)
        try:
            name = buf[pos : pos + length].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not UTF-8", pos) from None
        pos += length
        if name in out:
            raise FormatError(f"duplicate record {name!r}", pos)
        out[name], pos = decode_tensor(buf, pos)
    return out


def save_checkpoint(path, named_tensors) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(named_tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
