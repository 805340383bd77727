from __future__ import annotations

import numpy as np

from ..tensor import ShapeError, channel_view
from .base import Layer, Param, channel_axes, channel_sum

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BatchNorm(Layer):
    """Per-channel batch normalization over axis 1 of (N, C) or (N, C, H, W).

    The affine part is evaluated in float64 and the output is returned in
    float64.  A sign activation right after the norm then sees the same
    decision value whether its threshold is kept separate or folded into the
    bias, so folding is bit-exact in practice.
    """

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(np.ones(channels, dtype=self.dtype))
        self.beta = Param(np.zeros(channels, dtype=self.dtype))
        self.running_mean = np.zeros(channels, dtype=self.dtype)
        self.running_var = np.ones(channels, dtype=self.dtype)
        self._cache = None

    def eval_affine(self) -> tuple[np.ndarray, np.ndarray]:
        """(scale, shift) in float64 such that eval output is ``x*scale + shift``."""
        scale = self.gamma.value.astype(np.float64) / np.sqrt(self.running_var.astype(np.float64) + self.eps)
        shift = self.beta.value.astype(np.float64) - self.running_mean.astype(np.float64) * scale
        return scale, shift

    def forward(self, x):
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError(f"BatchNorm({self.channels}) got input of shape {x.shape}")
        x64 = x.astype(np.float64)
        if not self.training:
            scale, shift = self.eval_affine()
            return x64 * channel_view(scale, x.ndim) + channel_view(shift, x.ndim)
        axes = channel_axes(x.ndim)
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x64 - channel_view(mean, x.ndim)) * channel_view(inv_std, x.ndim)
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype)
        self._cache = (xhat, inv_std)
        g = self.gamma.value.astype(np.float64)
        return xhat * channel_view(g, x.ndim) + channel_view(self.beta.value.astype(np.float64), x.ndim)

    def backward(self, grad):
        xhat, inv_std = self._cache
        nd = grad.ndim
        self.beta.grad += channel_sum(grad).astype(self.beta.grad.dtype)
        g64 = grad.astype(np.float64)
        self.gamma.grad += channel_sum(g64 * xhat).astype(self.gamma.grad.dtype)
        axes = channel_axes(nd)
        dxhat = g64 * channel_view(self.gamma.value.astype(np.float64), nd)
        mean_d = dxhat.mean(axis=axes)
        mean_dx = (dxhat * xhat).mean(axis=axes)
        dx = (dxhat - channel_view(mean_d, nd) - xhat * channel_view(mean_dx, nd)) * channel_view(inv_std, nd)
        return dx.astype(self.dtype)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffer(self, name, value):
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self, name, np.array(value, dtype=self.dtype))

    def __repr__(self):
        return f"BatchNorm({self.channels})"


def batchnorm_forward(x, gamma, beta, eps=BN_EPS):
    """Training-mode batch norm on a fresh layer (for tests and examples)."""
    bn = BatchNorm(x.shape[1], eps=eps)
    bn.gamma.value = np.asarray(gamma, dtype=bn.dtype).reshape(-1)
    bn.beta.value = np.asarray(beta, dtype=bn.dtype).reshape(-1)
    bn.training = True
    return bn.forward(x)


def _windows(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 pooling needs even spatial dims, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def _unwindows(win: np.ndarray) -> np.ndarray:
    n, c, h2, w2, _ = win.shape
    return win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)


class MaxPool2x2(Layer):
    """2x2/2 max pooling; ties route the gradient to the first window element."""

    def forward(self, x):
        win = _windows(x)
        # argmax returns the first maximal index
        self._idx = win.argmax(axis=-1)
        self._shape = win.shape
        return np.take_along_axis(win, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        gw = np.zeros(self._shape, dtype=grad.dtype)
        np.put_along_axis(gw, self._idx[..., None], grad[..., None], axis=-1)
        return _unwindows(gw)


class AvgPool2x2(Layer):
    def forward(self, x):
        return _windows(x).mean(axis=-1).astype(x.dtype)

    def backward(self, grad):
        gw = np.repeat(grad[..., None] / 4, 4, axis=-1)
        return _unwindows(gw)


def maxpool2x2(x):
    return MaxPool2x2().forward(x)


def avgpool2x2(x):
    return AvgPool2x2().forward(x)


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._shape
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._shape).copy()


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n
