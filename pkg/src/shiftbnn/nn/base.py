from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import DTYPE


@dataclass(eq=False)
class Param:
    """A trainable tensor and its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    trainable: bool = True

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = np.zeros_like(self.value)


class Layer:
    """Base class for forward/backward network nodes.

    Subclasses cache whatever the backward pass needs during ``forward``;
    a layer instance therefore handles one batch at a time.
    """

    training = False
    # When set, sign activations and binary weights are replaced by their
    # differentiable stand-ins (hardtanh and latent real weights).
    surrogate = False
    dtype = DTYPE

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def params(self) -> dict[str, Param]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffer(self, name: str, value: np.ndarray):
        raise KeyError(name)

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def __repr__(self):
        return f"{type(self).__name__}()"


def channel_axes(ndim: int) -> tuple[int, ...]:
    """Axes reduced for per-channel statistics (all but axis 1)."""
    return (0,) + tuple(range(2, ndim))


def channel_sum(g: np.ndarray) -> np.ndarray:
    """Per-channel sum of ``g`` (axis 1), accumulated in float64.

    Both the batch-norm bias and the trainable sign threshold reduce their
    gradients through this function, which keeps the two exactly mirrored.
    """
    return g.sum(axis=channel_axes(g.ndim), dtype=np.float64)
