from __future__ import annotations

from typing import Iterator

import numpy as np

from .base import Layer, Param
from .layers import AvgPool2x2


class Sequential(Layer):
    def __init__(self, layers: list[tuple[str, Layer]]):
        names = [n for n, _ in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        self.layers = list(layers)

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def children(self):
        return self.layers

    def __getitem__(self, name: str) -> Layer:
        for n, layer in self.layers:
            if n == name:
                return layer
        raise KeyError(name)

    def __repr__(self):
        inner = "\n".join(f"  {n}: {layer!r}" for n, layer in self.layers)
        return f"Sequential(\n{inner}\n)"


class ChannelPadShortcut(Layer):
    """Parameter-free downsampling shortcut: 2x2 average pool, then zero channels."""

    def __init__(self, in_channels: int, out_channels: int, downsample: bool):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.pool = AvgPool2x2() if downsample else None

    def forward(self, x):
        if self.pool is not None:
            x = self.pool.forward(x)
        extra = self.out_channels - self.in_channels
        if extra:
            pad = np.zeros((x.shape[0], extra) + x.shape[2:], dtype=x.dtype)
            x = np.concatenate([x, pad], axis=1)
        return x

    def backward(self, grad):
        grad = grad[:, :self.in_channels]
        if self.pool is not None:
            grad = self.pool.backward(grad)
        return grad


class Residual(Layer):
    """``post(body(x) + shortcut(x))``; identity shortcut when none is given."""

    def __init__(self, body: Sequential, shortcut: Layer | None = None, post: Layer | None = None):
        self.body = body
        self.shortcut = shortcut
        self.post = post

    def forward(self, x):
        s = x if self.shortcut is None else self.shortcut.forward(x)
        y = self.body.forward(x) + s
        if self.post is not None:
            y = self.post.forward(y)
        return y

    def backward(self, grad):
        if self.post is not None:
            grad = self.post.backward(grad)
        gx = self.body.backward(grad)
        gs = grad if self.shortcut is None else self.shortcut.backward(grad)
        return gx + gs

    def children(self):
        out = [("body", self.body)]
        if self.shortcut is not None:
            out.append(("shortcut", self.shortcut))
        if self.post is not None:
            out.append(("post", self.post))
        return out


def named_layers(root: Layer, prefix: str = "") -> Iterator[tuple[str, Layer]]:
    """Depth-first (qualified name, layer) pairs, including ``root``."""
    yield prefix, root
    for name, child in root.children():
        yield from named_layers(child, f"{prefix}.{name}" if prefix else name)


def named_params(root: Layer) -> dict[str, Param]:
    out = {}
    for qname, layer in named_layers(root):
        for pname, p in layer.params().items():
            out[f"{qname}.{pname}" if qname else pname] = p
    return out


def named_buffers(root: Layer) -> dict[str, np.ndarray]:
    out = {}
    for qname, layer in named_layers(root):
        for bname, b in layer.buffers().items():
            out[f"{qname}.{bname}" if qname else bname] = b
    return out


def set_training(root: Layer, training: bool):
    for _, layer in named_layers(root):
        layer.training = training


def set_surrogate(root: Layer, surrogate: bool):
    for _, layer in named_layers(root):
        layer.surrogate = surrogate


def set_dtype(root: Layer, dtype):
    for _, layer in named_layers(root):
        layer.dtype = dtype
        for p in layer.params().values():
            p.astype(dtype)
        for bname, b in layer.buffers().items():
            try:
                layer.set_buffer(bname, b.astype(dtype))
            except KeyError:
                pass
