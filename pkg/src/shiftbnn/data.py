"""MNIST (IDX) and CIFAR-10 (binary batches) loading and batching.

Directory layout expected by the loaders::

    <mnist dir>/train-images-idx3-ubyte   train-labels-idx1-ubyte
                t10k-images-idx3-ubyte    t10k-labels-idx1-ubyte
    <cifar dir>/data_batch_1.bin ... data_batch_5.bin   test_batch.bin

``.gz`` variants of the MNIST files are accepted too.  When no directory is
given, ``$SHIFTBNN_DATA/mnist`` and ``$SHIFTBNN_DATA/cifar-10-batches-bin``
are used.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class FormatError(ValueError):
    pass


class DatasetNotFound(FileNotFoundError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, normalized
    labels: np.ndarray  # (N,) int64
    split: str
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        """First ``n`` items (``n <= 0`` keeps everything)."""
        if n <= 0 or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split, self.name)


def default_dir(name: str) -> Path:
    root = Path(os.environ.get("SHIFTBNN_DATA", "data"))
    return root / {"mnist": "mnist", "cifar10": "cifar-10-batches-bin"}[name]


def _read(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise DatasetNotFound(str(path))


def parse_idx(buf: bytes, expect_magic: int) -> np.ndarray:
    """Parse an IDX file holding unsigned bytes."""
    if len(buf) < 8:
        raise FormatError("truncated IDX header at offset 0")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expect_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x} at offset 0, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"truncated IDX header at offset {len(buf)}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    size = int(np.prod(dims))
    if len(buf) < header + size:
        raise FormatError(f"truncated IDX payload: need {header + size} bytes, file ends at offset {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=header).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x0800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def read_mnist_split(directory: str | Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(uint8 images (N, 28, 28), uint8 labels)`` for one split."""
    directory = Path(directory)
    img_name, lbl_name = MNIST_FILES[split]
    try:
        images = parse_idx(_read(directory / img_name), IDX_IMAGES_MAGIC)
        labels = parse_idx(_read(directory / lbl_name), IDX_LABELS_MAGIC)
    except DatasetNotFound as e:
        raise DatasetNotFound(f"MNIST file missing: {e}; expected {img_name} and {lbl_name} in {directory}") from None
    if len(images) != len(labels):
        raise FormatError(f"MNIST {split}: {len(images)} images vs {len(labels)} labels")
    return images, labels


def _normalize(raw: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = raw.astype(np.float32) / 255.0
    return ((x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)).astype(np.float32)


def channel_stats(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of ``raw`` uint8 (N, C, H, W) scaled to [0, 1]."""
    x = raw.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)).astype(np.float32), x.std(axis=(0, 2, 3)).astype(np.float32)


def load_mnist(directory: str | Path | None = None) -> tuple[Dataset, Dataset]:
    directory = Path(directory) if directory is not None else default_dir("mnist")
    tr_x, tr_y = read_mnist_split(directory, "train")
    te_x, te_y = read_mnist_split(directory, "test")
    tr_x, te_x = tr_x[:, None], te_x[:, None]
    mean, std = channel_stats(tr_x)
    train = Dataset(_normalize(tr_x, mean, std), tr_y.astype(np.int64), "train", "mnist")
    test = Dataset(_normalize(te_x, mean, std), te_y.astype(np.int64), "test", "mnist")
    return train, test


def parse_cifar_records(buf: bytes, name: str = "") -> tuple[np.ndarray, np.ndarray]:
    """``(labels uint8 (N,), pixels uint8 (N, 3, 32, 32))`` from one batch file."""
    if len(buf) % CIFAR_RECORD:
        raise FormatError(f"{name}: length {len(buf)} is not a multiple of {CIFAR_RECORD}; "
                          f"partial record at offset {len(buf) - len(buf) % CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{name}: label {labels[bad[0]]} > 9 at offset {bad[0] * CIFAR_RECORD}")
    return labels, rec[:, 1:].reshape(-1, 3, 32, 32)


def encode_cifar_records(labels: np.ndarray, pixels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    return np.concatenate([labels, pixels], axis=1).tobytes()


def read_cifar_split(directory: str | Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    labels, pixels = [], []
    for name in CIFAR_FILES[split]:
        path = directory / name
        if not path.exists():
            raise DatasetNotFound(f"CIFAR-10 file missing: {path}; expected "
                                  f"{', '.join(CIFAR_FILES['train'] + CIFAR_FILES['test'])} in {directory}")
        y, x = parse_cifar_records(path.read_bytes(), name)
        labels.append(y)
        pixels.append(x)
    return np.concatenate(pixels), np.concatenate(labels)


def load_cifar10(directory: str | Path | None = None) -> tuple[Dataset, Dataset]:
    directory = Path(directory) if directory is not None else default_dir("cifar10")
    tr_x, tr_y = read_cifar_split(directory, "train")
    te_x, te_y = read_cifar_split(directory, "test")
    mean, std = channel_stats(tr_x)
    train = Dataset(_normalize(tr_x, mean, std), tr_y.astype(np.int64), "train", "cifar10")
    test = Dataset(_normalize(te_x, mean, std), te_y.astype(np.int64), "test", "cifar10")
    return train, test


def load(name: str, directory: str | Path | None = None) -> tuple[Dataset, Dataset]:
    if name == "mnist":
        return load_mnist(directory)
    if name == "cifar10":
        return load_cifar10(directory)
    raise ValueError(f"unknown dataset {name!r}")


def pad_images(ds: Dataset, pad: int) -> Dataset:
    """Zero-pad images spatially (e.g. 28x28 MNIST to 32x32 for vggsmall)."""
    if pad <= 0:
        return ds
    x = np.pad(ds.images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return Dataset(x, ds.labels, ds.split, ds.name)


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random ``pad``-pixel-padded crop and random horizontal flip."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    rows = dy[:, None] + np.arange(h)[None, :]
    cols = dx[:, None] + np.arange(w)[None, :]
    cols = np.where(flip[:, None], cols[:, ::-1], cols)
    return padded[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                  rows[:, None, :, None], cols[:, None, None, :]]


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def batches(ds: Dataset, batch_size: int, seed: int, augment: bool = False,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled ``(x, y)`` batches for one epoch; the last partial batch is kept.

    The order depends only on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ds))
    for s in range(0, len(ds), batch_size):
        idx = order[s:s + batch_size]
        x = ds.images[idx]
        if augment:
            x = augment_batch(x, rng)
        yield x, ds.labels[idx]
