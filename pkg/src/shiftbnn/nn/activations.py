from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import channel_view
from .base import Layer, Param, channel_sum


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SignActConfig:
    """Binary activation settings.

    ``threshold_shift`` is the decision point of the sign function; with
    ``trainable`` set it becomes the initial value of a learned threshold.
    """

    threshold_shift: float = 0.0
    trainable: bool = False
    per_channel: bool = False
    ste_clip: float = 1.0

    def __post_init__(self):
        if not self.ste_clip > 0:
            raise ConfigError(f"ste_clip must be > 0, got {self.ste_clip}")


@dataclass(frozen=True)
class GenHardtanhConfig:
    x_offset: float = 0.0
    y_offset: float = 0.0
    range: float = 1.0

    def __post_init__(self):
        if not self.range > 0:
            raise ConfigError(f"range must be > 0, got {self.range}")


RELU6 = GenHardtanhConfig(3.0, 3.0, 3.0)


def _bcast(th, x: np.ndarray):
    th = np.asarray(th)
    if th.ndim == 0 or th.size == 1:
        return th.reshape(())
    return channel_view(th, x.ndim, 1)


def sign_forward(x: np.ndarray, th=0.0, dtype=np.float32) -> np.ndarray:
    """-1 where ``x <= th``, +1 where ``x > th``.

    ``th`` is a scalar or a per-channel vector (channel axis 1).
    """
    return np.where(x > _bcast(th, x), 1, -1).astype(dtype)


def sign_backward(grad_out: np.ndarray, x: np.ndarray, th=0.0, ste_clip: float = 1.0,
                  per_channel: bool = False):
    """Hardtanh straight-through estimator centred on the threshold.

    Returns ``(grad_x, grad_th)``; ``grad_th`` is per-channel when
    ``per_channel`` is set, otherwise a length-1 array.
    """
    window = np.abs(x - _bcast(th, x)) <= ste_clip
    grad_x = np.where(window, grad_out, 0).astype(grad_out.dtype)
    if per_channel:
        grad_th = -channel_sum(grad_x)
    else:
        grad_th = -np.array([grad_x.sum(dtype=np.float64)])
    return grad_x, grad_th


def gen_hardtanh_forward(x: np.ndarray, cfg: GenHardtanhConfig) -> np.ndarray:
    return np.clip(x - cfg.x_offset, -cfg.range, cfg.range) + cfg.y_offset


def gen_hardtanh_backward(grad_out: np.ndarray, x: np.ndarray, cfg: GenHardtanhConfig) -> np.ndarray:
    z = x - cfg.x_offset
    return np.where((z > -cfg.range) & (z < cfg.range), grad_out, 0).astype(grad_out.dtype)


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


class SignAct(Layer):
    """Sign activation with a (possibly shifted, possibly trainable) threshold.

    In surrogate mode the forward pass is ``clip(x - th, -clip, clip)``,
    whose exact gradient is the STE used in normal mode.
    """

    def __init__(self, cfg: SignActConfig, channels: int | None = None):
        if cfg.per_channel and channels is None:
            raise ConfigError("per-channel thresholds need a channel count")
        self.cfg = cfg
        n = channels if cfg.per_channel else 1
        init = np.full(n, cfg.threshold_shift, dtype=self.dtype)
        self.threshold = Param(init, trainable=cfg.trainable)
        self.record = False
        self.last_plus_count = None
        self.last_size = None
        self._x = None

    @property
    def th(self) -> np.ndarray:
        return self.threshold.value

    def forward(self, x):
        self._x = x
        th = self.th if self.cfg.per_channel else self.th[0]
        if self.surrogate:
            c = self.cfg.ste_clip
            return np.clip(x - _bcast(th, x), -c, c).astype(self.dtype)
        y = sign_forward(x, th, self.dtype)
        if self.record:
            self.last_plus_count = int(np.count_nonzero(y > 0))
            self.last_size = y.size
        return y

    def backward(self, grad):
        th = self.th if self.cfg.per_channel else self.th[0]
        if self.surrogate:
            # exact derivative of the clipped surrogate (open window)
            z = self._x - _bcast(th, self._x)
            c = self.cfg.ste_clip
            gx = np.where((z > -c) & (z < c), grad, 0).astype(grad.dtype)
            gth = -channel_sum(gx) if self.cfg.per_channel else -np.array([gx.sum(dtype=np.float64)])
        else:
            gx, gth = sign_backward(grad, self._x, th, self.cfg.ste_clip, self.cfg.per_channel)
        if self.cfg.trainable:
            self.threshold.grad += gth.astype(self.threshold.grad.dtype)
        return gx

    def params(self):
        return {"threshold": self.threshold} if self.cfg.trainable else {}

    def buffers(self):
        return {} if self.cfg.trainable else {"threshold": self.threshold.value}

    def set_buffer(self, name, value):
        if name != "threshold" or self.cfg.trainable:
            raise KeyError(name)
        self.threshold.value = np.array(value, dtype=self.dtype).reshape(self.threshold.value.shape)

    def __repr__(self):
        return f"SignAct({self.cfg})"


class GenHardtanh(Layer):
    def __init__(self, cfg: GenHardtanhConfig):
        self.cfg = cfg
        self._x = None

    def forward(self, x):
        self._x = x
        return gen_hardtanh_forward(x, self.cfg).astype(self.dtype)

    def backward(self, grad):
        return gen_hardtanh_backward(grad, self._x, self.cfg)

    def __repr__(self):
        return f"GenHardtanh({self.cfg})"


class LeakyReLU(Layer):
    def __init__(self, slope: float):
        self.slope = float(slope)
        self._x = None

    def forward(self, x):
        self._x = x
        # keeps the input dtype so that slope 1 is an exact identity
        return leaky_relu(x, self.slope)

    def backward(self, grad):
        return np.where(self._x > 0, grad, self.slope * grad).astype(grad.dtype)

    def __repr__(self):
        return f"LeakyReLU({self.slope})"


class PReLU(Layer):
    """LeakyReLU with a learned per-channel negative slope."""

    def __init__(self, channels: int, init: float = 0.25):
        self.slope = Param(np.full(channels, init, dtype=self.dtype))
        self._x = None

    def forward(self, x):
        self._x = x
        a = channel_view(self.slope.value, x.ndim)
        return np.where(x > 0, x, a * x).astype(x.dtype)

    def backward(self, grad):
        x = self._x
        neg = x <= 0
        self.slope.grad += channel_sum(np.where(neg, grad * x, 0)).astype(self.slope.grad.dtype)
        a = channel_view(self.slope.value, x.ndim)
        return np.where(neg, a * grad, grad).astype(grad.dtype)

    def params(self):
        return {"slope": self.slope}
