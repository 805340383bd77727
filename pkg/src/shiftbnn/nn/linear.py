"""Real and binary-weight linear / convolution layers.

Binary weights follow the XNOR-Net recipe: ``B = sign(W)`` with
``sign(0) = +1`` and a per-output-channel scale ``alpha = mean(|W|)``.
Outputs are computed as ``(x @ B.T) * alpha`` so that, for ±1 inputs, the
matrix product is an exact integer and matches the packed kernels bit for bit.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..tensor import ShapeError, xavier_normal
from .base import Layer, Param

# im2col buffers are built per chunk of images to bound memory.
CONV_CHUNK = 64


def binarize_weights(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(B, alpha)`` for a weight with the output channel on axis 0."""
    b = np.where(w >= 0, 1, -1).astype(w.dtype)
    alpha = np.abs(w).reshape(w.shape[0], -1).mean(axis=1).astype(w.dtype)
    return b, alpha


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * pad}")
    return span // stride + 1


def im2col(x: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Patch matrix of shape (N*Ho*Wo, C*k*k), rows in (n, i, j) order."""
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def col2im(cols: np.ndarray, x_shape, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def effective_weight(w: np.ndarray, binary: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """(2-D matrix used in the product, per-output scale or None)."""
    if binary:
        b, alpha = binarize_weights(w)
        return b.reshape(w.shape[0], -1), alpha
    return w.reshape(w.shape[0], -1), None


def _matmul_scaled(x, m, alpha):
    y = x @ m.T
    if alpha is not None:
        y *= alpha
    return y


def linear_forward(x: np.ndarray, weight: np.ndarray, binary: bool = False) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects (N, {weight.shape[1]}), got {x.shape}")
    m, alpha = effective_weight(weight, binary)
    return _matmul_scaled(x.astype(weight.dtype, copy=False), m, alpha)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, binary: bool = False, stride: int = 1,
                   pad: int = 0) -> np.ndarray:
    o, c, k, _ = weight.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"conv2d expects (N, {c}, H, W), got {x.shape}")
    x = x.astype(weight.dtype, copy=False)
    n, _, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    m, alpha = effective_weight(weight, binary)
    out = np.empty((n, o, ho, wo), dtype=weight.dtype)
    for s in range(0, n, CONV_CHUNK):
        y = _matmul_scaled(im2col(x[s:s + CONV_CHUNK], k, stride, pad), m, alpha)
        out[s:s + CONV_CHUNK] = y.reshape(-1, ho, wo, o).transpose(0, 3, 1, 2)
    return out


class _WeightLayer(Layer):
    def __init__(self, shape, binary: bool, rng):
        self.binary = binary
        self.weight = Param(xavier_normal(shape, rng))
        self._x = None

    @property
    def binary_active(self) -> bool:
        return self.binary and not self.surrogate

    def params(self):
        return {"weight": self.weight}


class Linear(_WeightLayer):
    """Fully connected layer without bias (a batch norm always follows)."""

    def __init__(self, in_features: int, out_features: int, binary: bool = False, rng=0):
        super().__init__((out_features, in_features), binary, rng)
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x):
        self._x = x.astype(self.dtype, copy=False)
        return linear_forward(self._x, self.weight.value, self.binary_active)

    def backward(self, grad):
        m, alpha = effective_weight(self.weight.value, self.binary_active)
        grad = grad.astype(self.dtype, copy=False)
        # weight STE: the gradient w.r.t. the effective weight goes straight to W
        self.weight.grad += grad.T @ self._x
        if alpha is not None:
            return (grad * alpha) @ m
        return grad @ m

    def __repr__(self):
        return f"Linear({self.in_features}, {self.out_features}, binary={self.binary})"


class Conv2d(_WeightLayer):
    """2-D convolution via im2col, no bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 pad: int = 1, binary: bool = False, rng=0):
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        super().__init__(shape, binary, rng)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k, self.stride, self.pad = kernel_size, stride, pad

    def forward(self, x):
        self._x = x.astype(self.dtype, copy=False)
        return conv2d_forward(self._x, self.weight.value, self.binary_active, self.stride, self.pad)

    def backward(self, grad):
        m, alpha = effective_weight(self.weight.value, self.binary_active)
        x = self._x
        grad = grad.astype(self.dtype, copy=False)
        mg = m * alpha[:, None] if alpha is not None else m
        dw = np.zeros_like(m)
        dx = np.empty_like(x)
        for s in range(0, x.shape[0], CONV_CHUNK):
            xs = x[s:s + CONV_CHUNK]
            g2 = grad[s:s + CONV_CHUNK].transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
            cols = im2col(xs, self.k, self.stride, self.pad)
            dw += g2.T @ cols
            dx[s:s + CONV_CHUNK] = col2im(g2 @ mg, xs.shape, self.k, self.stride, self.pad)
        self.weight.grad += dw.reshape(self.weight.value.shape)
        return dx

    def __repr__(self):
        return (f"Conv2d({self.in_channels}, {self.out_channels}, k={self.k}, stride={self.stride}, "
                f"pad={self.pad}, binary={self.binary})")
