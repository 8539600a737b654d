"""Layers with forward/backward passes.

Every layer works on batches: spatial layers see ``(N, C, H, W)``, the
dense head sees ``(N, D)``. ``forward`` stores whatever ``backward``
needs; calling ``backward`` without a matching ``forward`` raises
:class:`~lithonet.errors.UsageError`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError

DEFAULT_LEVELS = (1, 2, 4)


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[int, ...] = DEFAULT_LEVELS

    def __post_init__(self):
        if not self.levels or any(g < 1 for g in self.levels):
            raise ShapeError(f"pyramid levels must be positive, got {self.levels}")

    @property
    def bins(self) -> int:
        return sum(g * g for g in self.levels)

    @property
    def finest(self) -> int:
        return max(self.levels)


def bin_edges(size: int, grid: int) -> list[tuple[int, int]]:
    """Half-open ``[floor(i*size/g), ceil((i+1)*size/g))`` ranges along one axis."""
    return [((i * size) // grid, -((-(i + 1) * size) // grid)) for i in range(grid)]


def _spp_argmax(x: np.ndarray, spec: PyramidSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return bin maxima ``(N, C, B)`` and flat ``row * W + col`` winners."""
    n, c, h, w = x.shape
    if h < spec.finest or w < spec.finest:
        raise ShapeError(
            f"spatial pyramid level {spec.finest}x{spec.finest} needs an input of at least "
            f"{spec.finest}x{spec.finest}, got {h}x{w}; use larger images or fewer levels"
        )
    values = np.empty((n, c, spec.bins), dtype=T.DTYPE)
    index = np.empty((n, c, spec.bins), dtype=np.intp)
    b = 0
    for g in spec.levels:
        row_edges = bin_edges(h, g)
        col_edges = bin_edges(w, g)
        for r0, r1 in row_edges:
            for c0, c1 in col_edges:
                region = x[:, :, r0:r1, c0:c1].reshape(n, c, -1)
                local = region.argmax(axis=-1)
                values[:, :, b] = np.take_along_axis(region, local[..., None], axis=-1)[..., 0]
                bw = c1 - c0
                index[:, :, b] = (r0 + local // bw) * w + (c0 + local % bw)
                b += 1
    return values, index


def _spp_route(grad: np.ndarray, index: np.ndarray, input_shape) -> np.ndarray:
    n, c, h, w = input_shape
    grad_in = np.zeros((n * c, h * w), dtype=T.DTYPE)
    rows = np.broadcast_to(np.arange(n * c)[:, None], (n * c, index.shape[-1]))
    # a cell can win bins on several levels, so accumulate
    np.add.at(grad_in, (rows, index.reshape(n * c, -1)), grad.reshape(n * c, -1))
    return grad_in.reshape(input_shape)


def spp_forward(x, spec: PyramidSpec = PyramidSpec()) -> np.ndarray:
    """Fixed-length max-pyramid descriptor, ``C * bins`` long for any ``H, W``.

    Bins are level-major within each channel; channels follow in order.
    """
    x, single = T._batched(T.as_tensor(x))
    values, _ = _spp_argmax(x, spec)
    out = values.reshape(x.shape[0], -1)
    return out[0] if single else out


def spp_backward(x, spec: PyramidSpec, grad_out) -> np.ndarray:
    x, single = T._batched(T.as_tensor(x))
    grad_out = T.as_tensor(grad_out)
    n, c = x.shape[:2]
    expected = (c * spec.bins,) if single else (n, c * spec.bins)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != SPP output shape {expected}")
    _, index = _spp_argmax(x, spec)
    grad_in = _spp_route(grad_out.reshape(n, c, spec.bins), index, x.shape)
    return grad_in[0] if single else grad_in


def gap_forward(x) -> np.ndarray:
    """Per-channel mean over the spatial extent."""
    x, single = T._batched(T.as_tensor(x))
    out = x.mean(axis=(2, 3))
    return out[0] if single else out


def gap_over_spp(x, spec: PyramidSpec = PyramidSpec()) -> np.ndarray:
    """Per-channel mean of the pyramid bin maxima."""
    x, single = T._batched(T.as_tensor(x))
    values, _ = _spp_argmax(x, spec)
    out = values.mean(axis=-1)
    return out[0] if single else out


def dropout_forward(x, p: float, train: bool, rng: Optional[np.random.Generator] = None):
    """Inverted dropout. Returns ``(output, keep_mask)``; the mask is ``None`` at inference."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"drop probability must lie in [0, 1), got {p}")
    x = T.as_tensor(x)
    if not train:
        return x.copy(), None
    if p == 0.0:
        return x.copy(), np.ones(x.shape, dtype=bool)
    if rng is None:
        raise UsageError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= p
    return np.where(keep, x / (1.0 - p), 0.0), keep


class Layer:
    """Base class. ``kind`` names the layer type in checkpoints and summaries."""

    kind: str = ""

    def __init__(self):
        self._cache = None

    @property
    def params(self) -> list[np.ndarray]:
        return []

    @property
    def grads(self) -> list[np.ndarray]:
        return []

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for a per-sample input shape."""
        return shape

    def _take_cache(self):
        if self._cache is None:
            raise UsageError(f"{self.kind}.backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv3x3(Layer):
    kind = "Conv3x3"

    def __init__(self, in_channels: int, filters: int, padding: int = 1, stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.filters = filters
        self.padding = padding
        self.stride = stride
        # the first layer of a network has no use for its input gradient
        self.propagate = True
        self.weight = np.zeros((filters, in_channels, T.KERNEL, T.KERNEL), dtype=T.DTYPE)
        self.bias = np.zeros(filters, dtype=T.DTYPE)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def fan_in(self) -> int:
        return self.in_channels * T.KERNEL * T.KERNEL

    @property
    def params(self):
        return [self.weight, self.bias]

    @property
    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def forward(self, x, train=False, rng=None):
        self._cache = x
        return T.conv2d(x, self.weight, self.bias, self.padding, self.stride)

    def backward(self, grad):
        x = self._take_cache()
        gx, gw, gb = T.conv2d_backward(x, self.weight, grad, self.padding, self.stride, self.propagate)
        self.grad_weight[...] = gw
        self.grad_bias[...] = gb
        return gx

    def output_shape(self, shape):
        _, h, w = shape
        return (
            self.filters,
            T.conv_output_size(h, self.padding, self.stride),
            T.conv_output_size(w, self.padding, self.stride),
        )

    def __repr__(self):
        return f"Conv3x3({self.in_channels}->{self.filters})"


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=False, rng=None):
        self._cache = x
        return T.relu(x)

    def backward(self, grad):
        return T.relu_backward(self._take_cache(), grad)


class MaxPool(Layer):
    kind = "MaxPool"

    def __init__(self, window: int = 2, stride: int = 2):
        super().__init__()
        self.window = window
        self.stride = stride

    def forward(self, x, train=False, rng=None):
        out, index = T.maxpool2d(x, self.window, self.stride)
        self._cache = (x.shape, index)
        return out

    def backward(self, grad):
        shape, index = self._take_cache()
        return T.maxpool2d_backward(grad, index, shape, self.window, self.stride)

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.window or w < self.window:
            raise ShapeError(f"input {h}x{w} is smaller than the pooling window")
        return (
            c,
            T.pool_output_size(h, self.window, self.stride),
            T.pool_output_size(w, self.window, self.stride),
        )

    def __repr__(self):
        return f"MaxPool({self.window}/{self.stride})"


class SPP(Layer):
    """Spatial pyramid max pooling; emits ``(N, C, bins)``."""

    kind = "SPP"

    def __init__(self, spec: PyramidSpec = PyramidSpec()):
        super().__init__()
        self.spec = spec

    def forward(self, x, train=False, rng=None):
        values, index = _spp_argmax(x, self.spec)
        self._cache = (x.shape, index)
        return values

    def backward(self, grad):
        shape, index = self._take_cache()
        return _spp_route(grad, index, shape)

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.spec.finest or w < self.spec.finest:
            raise ShapeError(f"input {h}x{w} is smaller than the finest pyramid grid")
        return (c, self.spec.bins)

    def __repr__(self):
        return f"SPP{list(self.spec.levels)}"


class GAP(Layer):
    """Mean over every axis after the channel axis."""

    kind = "GAP"

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=-1)

    def backward(self, grad):
        shape = self._take_cache()
        count = math.prod(shape[2:])
        return np.broadcast_to((grad / count).reshape(grad.shape + (1,) * (len(shape) - 2)), shape).copy()

    def output_shape(self, shape):
        return (shape[0],)


class Dense(Layer):
    """Affine layer; flattens trailing axes in C order (channel-major, row-major)."""

    kind = "Dense"

    def __init__(self, in_features: int, units: int):
        super().__init__()
        self.in_features = in_features
        self.units = units
        self.weight = np.zeros((in_features, units), dtype=T.DTYPE)
        self.bias = np.zeros(units, dtype=T.DTYPE)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def fan_in(self) -> int:
        return self.in_features

    @property
    def params(self):
        return [self.weight, self.bias]

    @property
    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def forward(self, x, train=False, rng=None):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(
                f"Dense layer expects {self.in_features} features, got {flat.shape[1]} "
                f"(input shape {x.shape[1:]})"
            )
        self._cache = (x.shape, flat)
        return T.matmul_affine(flat, self.weight, self.bias)

    def backward(self, grad):
        shape, flat = self._take_cache()
        gx, gw, gb = T.matmul_affine_backward(flat, self.weight, grad)
        self.grad_weight[...] = gw
        self.grad_bias[...] = gb
        return gx.reshape(shape)

    def output_shape(self, shape):
        if math.prod(shape) != self.in_features:
            raise ShapeError(f"Dense layer expects {self.in_features} features, got shape {shape}")
        return (self.units,)

    def __repr__(self):
        return f"Dense({self.in_features}->{self.units})"


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ShapeError(f"drop probability must lie in [0, 1), got {p}")
        self.p = p

    def forward(self, x, train=False, rng=None):
        out, keep = dropout_forward(x, self.p, train, rng)
        self._cache = ("mask", keep)
        return out

    def backward(self, grad):
        _, keep = self._take_cache()
        if keep is None:
            return grad
        return np.where(keep, grad / (1.0 - self.p), 0.0)

    def __repr__(self):
        return f"Dropout({self.p})"


class SoftmaxOutput(Layer):
    kind = "SoftmaxOutput"

    def forward(self, x, train=False, rng=None):
        probs = T.softmax(x, axis=-1)
        self._cache = probs
        return probs

    def backward(self, grad):
        probs = self._take_cache()
        return probs * (grad - (grad * probs).sum(axis=-1, keepdims=True))


def he_init(layers: Sequence[Layer], rng: np.random.Generator) -> None:
    """Normal(0, sqrt(2 / fan_in)) weights, zero biases, in layer order."""
    for layer in layers:
        if isinstance(layer, (Conv3x3, Dense)):
            std = math.sqrt(2.0 / layer.fan_in)
            layer.weight[...] = rng.normal(0.0, std, size=layer.weight.shape)
            layer.bias[...] = 0.0
