"""Raw numeric kernels shared by every layer.

Tensors are plain ``numpy.float64`` arrays. Spatial kernels take either a
single ``(C, H, W)`` activation or a batch ``(N, C, H, W)`` and return the
same rank they were given. Convolution weights are laid out
``(C_out, C_in, 3, 3)``; dense weights are ``(in, out)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float64
KERNEL = 3


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C, H, W) or (N, C, H, W) array, got shape {x.shape}")


def conv_output_size(size: int, padding: int, stride: int) -> int:
    return (size + 2 * padding - KERNEL) // stride + 1


def _offsets():
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            yield ki, kj


def _taps(weights: np.ndarray) -> np.ndarray:
    # (kH, kW, C_out, C_in), contiguous so every tap hits BLAS
    return np.ascontiguousarray(weights.transpose(2, 3, 0, 1))


# few input channels: one (C*9, M) patch matrix beats nine thin GEMMs
_IM2COL_MAX_ROWS = 72


def _im2col(xp: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, KERNEL, KERNEL) + xp.shape[1:2] + (ho, wo), dtype=DTYPE)
    for ki, kj in _offsets():
        cols[:, ki, kj] = xp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]
    return cols.reshape(c * KERNEL * KERNEL, -1)


def conv2d(x, weights, bias, padding: int = 1, stride: int = 1) -> np.ndarray:
    """3x3 cross-correlation summed over input channels, plus a per-channel bias."""
    x, single = _batched(as_tensor(x))
    weights = as_tensor(weights)
    bias = as_tensor(bias)
    n, c, h, w = x.shape
    if weights.ndim != 4 or weights.shape[1:] != (c, KERNEL, KERNEL):
        raise ShapeError(
            f"weights of shape {weights.shape} do not match {c} input channels "
            f"with a {KERNEL}x{KERNEL} kernel"
        )
    c_out = weights.shape[0]
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    if h + 2 * padding < KERNEL or w + 2 * padding < KERNEL:
        raise ShapeError(f"padded input {h}x{w} (+{padding}) is smaller than the kernel")

    ho = conv_output_size(h, padding, stride)
    wo = conv_output_size(w, padding, stride)
    # channel-first copy keeps every offset slice a single GEMM operand
    xp = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if c * KERNEL * KERNEL <= _IM2COL_MAX_ROWS:
        out = weights.reshape(c_out, -1) @ _im2col(xp, ho, wo, stride)
    else:
        taps = _taps(weights)
        out = np.zeros((c_out, n * ho * wo), dtype=DTYPE)
        for ki, kj in _offsets():
            patch = xp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]
            out += taps[ki, kj] @ np.ascontiguousarray(patch).reshape(c, -1)
    out += bias[:, None]
    out = out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(x, weights, grad_out, padding: int = 1, stride: int = 1, input_grad: bool = True):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d`.

    ``grad_input`` is ``None`` when ``input_grad`` is false.
    """
    x, single = _batched(as_tensor(x))
    weights = as_tensor(weights)
    grad_out = as_tensor(grad_out)
    if single:
        grad_out = grad_out[None]
    n, c, h, w = x.shape
    if weights.ndim != 4 or weights.shape[1:] != (c, KERNEL, KERNEL):
        raise ShapeError(f"weights of shape {weights.shape} do not match {c} input channels")
    c_out = weights.shape[0]
    ho = conv_output_size(h, padding, stride)
    wo = conv_output_size(w, padding, stride)
    if grad_out.shape != (n, c_out, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output {(n, c_out, ho, wo)}")

    xp = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(c_out, -1)
    grad_b = g.sum(axis=1)
    if not input_grad and c * KERNEL * KERNEL <= _IM2COL_MAX_ROWS:
        grad_w = (g @ _im2col(xp, ho, wo, stride).T).reshape(weights.shape)
        return None, grad_w, grad_b
    taps_t = np.ascontiguousarray(weights.transpose(2, 3, 1, 0))
    grad_xp = np.zeros_like(xp) if input_grad else None
    grad_w = np.empty_like(weights)
    for ki, kj in _offsets():
        rows = slice(ki, ki + stride * (ho - 1) + 1, stride)
        cols = slice(kj, kj + stride * (wo - 1) + 1, stride)
        patch = np.ascontiguousarray(xp[:, :, rows, cols]).reshape(c, -1)
        grad_w[:, :, ki, kj] = g @ patch.T
        if input_grad:
            grad_xp[:, :, rows, cols] += (taps_t[ki, kj] @ g).reshape(c, n, ho, wo)
    if not input_grad:
        return None, grad_w, grad_b
    grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
    grad_x = np.ascontiguousarray(grad_x)
    return (grad_x[0] if single else grad_x), grad_w, grad_b


def pool_output_size(size: int, window: int, stride: int) -> int:
    return (size - window) // stride + 1


def maxpool2d(x, window: int = 2, stride: int = 2):
    """Max over ``window`` x ``window`` patches.

    Returns the pooled tensor and, for each output cell, the flat
    ``row * W + col`` index of the winning input cell. Ties go to the
    first cell in row-major order.
    """
    x, single = _batched(as_tensor(x))
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ShapeError(f"input {h}x{w} is smaller than the {window}x{window} pooling window")
    ho = pool_output_size(h, window, stride)
    wo = pool_output_size(w, window, stride)
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo].reshape(n, c, ho, wo, window * window)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // window
    cols = np.arange(wo)[None, :] * stride + local % window
    index = rows * w + cols
    if single:
        return out[0], index[0]
    return out, index


def maxpool2d_backward(grad_out, index, input_shape, window: int = 2, stride: int = 2) -> np.ndarray:
    """Route each pooled gradient to its argmax cell."""
    grad_out = as_tensor(grad_out)
    if grad_out.shape != index.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != index shape {index.shape}")
    *lead, h, w = input_shape
    grad_in = np.zeros((int(np.prod(lead)), h * w), dtype=DTYPE)
    flat_idx = index.reshape(grad_in.shape[0], -1)
    flat_grad = grad_out.reshape(grad_in.shape[0], -1)
    if stride >= window:
        # non-overlapping windows: each input cell wins at most once
        np.put_along_axis(grad_in, flat_idx, flat_grad, axis=1)
    else:
        rows = np.broadcast_to(np.arange(grad_in.shape[0])[:, None], flat_idx.shape)
        np.add.at(grad_in, (rows, flat_idx), flat_grad)
    return grad_in.reshape(input_shape)


def matmul_affine(x, weights, bias) -> np.ndarray:
    """``x @ weights + bias`` for a vector ``(D,)`` or a batch ``(N, D)``."""
    x = as_tensor(x)
    weights = as_tensor(weights)
    bias = as_tensor(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"cannot multiply input {x.shape} by weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[1]},)")
    return x @ weights + bias


def matmul_affine_backward(x, weights, grad_out):
    x = as_tensor(x)
    grad_out = as_tensor(grad_out)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    return (grad_out @ weights.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    return np.where(as_tensor(x) > 0.0, grad_out, 0.0)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def add(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def scale(a, factor: float) -> np.ndarray:
    return as_tensor(a) * factor
