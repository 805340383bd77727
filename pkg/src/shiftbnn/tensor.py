"""Dense tensor helpers.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order, NCHW for
images.  Training values are float32; a few accumulations (batch-norm
statistics) are carried out in float64 internally.

Random draws use numpy's ``Generator`` with the PCG64 bit generator
(``numpy.random.default_rng``), so a given integer seed produces the same
stream on every platform numpy supports.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("empty shape")
    if any(s < 1 for s in shape):
        raise ShapeError(f"shape entries must be >= 1, got {shape}")
    return shape


def fans(shape: Sequence[int]) -> tuple[int, int]:
    """(fan_in, fan_out) for a weight of the given shape.

    Linear weights are (out, in); conv weights are (out, in, kh, kw).
    """
    shape = _check_shape(shape)
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_normal(shape: Sequence[int], rng: np.random.Generator | int) -> np.ndarray:
    shape = _check_shape(shape)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    fan_in, fan_out = fans(shape)
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal(shape) * std).astype(DTYPE)


def create(shape: Sequence[int], fill: str = "zeros", value: float = 0.0,
           seed: int | np.random.Generator | None = None) -> np.ndarray:
    """Allocate a tensor.

    ``fill`` is one of ``"zeros"``, ``"constant"`` (uses ``value``) or
    ``"xavier_normal"`` (requires ``seed``).
    """
    shape = _check_shape(shape)
    if fill == "zeros":
        return np.zeros(shape, dtype=DTYPE)
    if fill == "constant":
        return np.full(shape, value, dtype=DTYPE)
    if fill == "xavier_normal":
        if seed is None:
            raise ValueError("xavier_normal fill needs a seed")
        return xavier_normal(shape, seed)
    raise ValueError(f"unknown fill rule {fill!r}")


def _norm_axes(t: np.ndarray, axes: int | Iterable[int]) -> tuple[int, ...]:
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(int(a) for a in axes)
    norm = []
    for a in axes:
        if not -t.ndim <= a < t.ndim:
            raise ShapeError(f"axis {a} out of range for rank {t.ndim}")
        norm.append(a % t.ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes {axes}")
    return tuple(norm)


def reduce(t: np.ndarray, axes: int | Iterable[int], kind: str = "mean") -> np.ndarray:
    """Reduce over ``axes``.  ``var`` is the biased (divide-by-N) estimator."""
    axes = _norm_axes(t, axes)
    if kind == "mean":
        return t.mean(axis=axes)
    if kind == "var":
        return t.var(axis=axes)
    if kind == "max":
        return t.max(axis=axes)
    if kind == "min":
        return t.min(axis=axes)
    raise ValueError(f"unknown reduction {kind!r}")


def channel_view(v: np.ndarray, ndim: int, axis: int = 1) -> np.ndarray:
    """Reshape a per-channel vector so it broadcasts along ``axis`` of a rank-``ndim`` tensor."""
    shape = [1] * ndim
    shape[axis] = -1
    return np.reshape(v, shape)


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}


def map2(a: np.ndarray, b: np.ndarray, op: str, channel_axis: int | None = None) -> np.ndarray:
    """Elementwise ``a op b``.

    ``b`` either has ``a``'s shape, or is a 1-D per-channel vector applied
    along ``channel_axis``.
    """
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}")
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        if channel_axis is None or b.ndim != 1:
            raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
        axis = channel_axis % a.ndim
        if b.shape[0] != a.shape[axis]:
            raise ShapeError(f"channel vector of length {b.shape[0]} does not match axis {axis} of {a.shape}")
        b = channel_view(b, a.ndim, axis)
    return _OPS[op](a, b)
