from __future__ import annotations

import math

import numpy as np

from .nn import Param


class Adam:
    """Bias-corrected Adam; no weight decay."""

    def __init__(self, params: dict[str, Param], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = {k: p for k, p in params.items() if p.trainable}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)
            p.zero_grad()


class SGD:
    """Heavy-ball momentum: ``v = mu*v + g``, ``w -= lr*v``."""

    def __init__(self, params: dict[str, Param], momentum: float = 0.9):
        self.params = {k: p for k, p in params.items() if p.trainable}
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += p.grad
            p.value -= (lr * v).astype(p.value.dtype)
            p.zero_grad()


def make_optimizer(name: str, params: dict[str, Param], momentum: float = 0.9):
    if name == "adam":
        return Adam(params)
    if name == "sgd":
        return SGD(params, momentum)
    raise ValueError(f"unknown optimizer {name!r}")


def lr_at(epoch: int, total_epochs: int, base_lr: float, warmup_epochs: int = 0) -> float:
    """Per-epoch learning rate: linear warmup, then cosine annealing to zero.

    Warmup epoch ``e`` (0-based) uses ``base_lr * (e + 1) / warmup_epochs``,
    so epoch 0 starts at ``base_lr / warmup_epochs`` and epoch
    ``warmup_epochs`` is the first cosine epoch at full ``base_lr``.
    """
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    span = total_epochs - warmup_epochs
    progress = (epoch - warmup_epochs) / span
    return base_lr * 0.5 * (1 + math.cos(math.pi * progress))
