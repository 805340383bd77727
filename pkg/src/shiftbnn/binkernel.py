"""Bit-packed ±1 tensors and XNOR-popcount inference.

Bit ``i`` of a row lives in word ``i // 64`` at bit position ``i % 64``
(+1 -> 1, -1 -> 0).  Rows are padded to whole 64-bit words and padding bits
are always 0.

For ±1 vectors ``a`` and ``b`` of length ``n``::

    dot(a, b) = 2 * popcount(~(a ^ b) & mask(n)) - n

Convolutions with zero padding see positions that are neither +1 nor -1;
those are handled with a per-row validity mask (``n`` becomes the number of
valid positions).

Packed model file (little-endian)::

    b"SBNNPACK" | u32 version | u32 rank | rank x u32 input dims | u32 n_stages | stages...

Each stage starts with a u8 kind; see ``_write_stage`` for the payloads.
"""
from __future__ import annotations

import copy
import io
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .models import Model, fold_thresholds
from .nn import (AvgPool2x2, BatchNorm, Conv2d, Flatten, Linear, MaxPool2x2, Sequential, SignAct, binarize_weights,
                 conv2d_forward, im2col, linear_forward)
from .nn.linear import conv_out_size

WORD = 64
PACK_MAGIC = b"SBNNPACK"
PACK_VERSION = 1


class PackError(ValueError):
    pass


class UnfoldedThresholdError(PackError):
    pass


@dataclass
class BitTensor:
    shape: tuple[int, ...]
    words: np.ndarray  # (rows, nwords) uint64

    @property
    def n(self) -> int:
        return self.shape[-1]

    @property
    def nwords(self) -> int:
        return self.words.shape[-1]

    def validate(self):
        """Debug check: padding bits must be zero."""
        tail = self.n % WORD
        if tail and np.any(self.words[:, -1] >> np.uint64(tail)):
            raise PackError("non-zero padding bits in BitTensor")
        if self.nwords != -(-self.n // WORD):
            raise PackError("word count does not match logical length")


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean (rows, n) array into (rows, nwords) uint64."""
    rows, n = bits.shape
    nwords = -(-n // WORD)
    padded = np.zeros((rows, nwords * WORD), dtype=bool)
    padded[:, :n] = bits
    return np.packbits(padded, axis=1, bitorder="little").view("<u8").reshape(rows, nwords)


def _unpack_bits(words: np.ndarray, n: int) -> np.ndarray:
    u8 = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    return np.unpackbits(u8, axis=1, bitorder="little")[:, :n].astype(bool)


def pack(t: np.ndarray) -> BitTensor:
    t = np.asarray(t)
    if t.ndim == 0:
        raise PackError("cannot pack a scalar")
    if not np.all((t == 1) | (t == -1)):
        raise PackError("pack expects a tensor of ±1 values")
    rows = t.reshape(-1, t.shape[-1])
    return BitTensor(tuple(t.shape), _pack_bits(rows > 0))


def unpack(bt: BitTensor, dtype=np.float32) -> np.ndarray:
    bits = _unpack_bits(bt.words, bt.n)
    return np.where(bits, 1, -1).astype(dtype).reshape(bt.shape)


def tail_mask(n: int) -> np.ndarray:
    """Per-word mask selecting the first ``n`` bits of a row."""
    nwords = -(-n // WORD)
    mask = np.full(nwords, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    tail = n % WORD
    if tail:
        mask[-1] = np.uint64((1 << tail) - 1)
    return mask


def _words(x) -> np.ndarray:
    return x.words if isinstance(x, BitTensor) else np.asarray(x, dtype=np.uint64)


def xnor_popcount_dot(a, b, n: int | None = None) -> int:
    """±1 dot product of two packed rows."""
    if isinstance(a, BitTensor) and isinstance(b, BitTensor) and a.n != b.n:
        raise PackError(f"length mismatch {a.n} vs {b.n}")
    if n is None:
        n = a.n if isinstance(a, BitTensor) else b.n
    aw, bw = _words(a).reshape(-1), _words(b).reshape(-1)
    if aw.shape != bw.shape or aw.size != -(-n // WORD):
        raise PackError(f"length mismatch: {aw.size} and {bw.size} words for n={n}")
    agree = ~(aw ^ bw) & tail_mask(n)
    return 2 * int(np.bitwise_count(agree).sum()) - n


def xnor_popcount_matmul(a: np.ndarray, b: np.ndarray, n: int, valid: np.ndarray | None = None,
                         chunk_elems: int = 1 << 22) -> np.ndarray:
    """All-pairs ±1 dot products of packed rows ``a`` (N, W) and ``b`` (M, W).

    ``valid`` (N, W) restricts row ``i`` of ``a`` to its set bits; positions
    outside it contribute 0.
    """
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape[1] != b.shape[1]:
        raise PackError(f"word count mismatch {a.shape[1]} vs {b.shape[1]}")
    mask = tail_mask(n)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.int64)
    step = max(1, chunk_elems // max(1, b.size))
    for s in range(0, a.shape[0], step):
        aa = a[s:s + step, None, :]
        m = mask if valid is None else (valid[s:s + step] & mask)[:, None, :]
        agree = ~(aa ^ b[None]) & m
        pc = np.bitwise_count(agree).sum(axis=-1, dtype=np.int64)
        if valid is None:
            out[s:s + step] = 2 * pc - n
        else:
            nv = np.bitwise_count(valid[s:s + step] & mask).sum(axis=-1, dtype=np.int64)
            out[s:s + step] = 2 * pc - nv[:, None]
    return out


def _affine(y: np.ndarray, scale, shift, threshold):
    if threshold is not None and np.any(np.asarray(threshold) != 0):
        raise UnfoldedThresholdError("threshold must be folded into the batch-norm shift before packing")
    if scale is None:
        return y
    shape = [1] * y.ndim
    shape[1] = -1
    return y.astype(np.float64) * np.reshape(scale, shape) + np.reshape(shift, shape)


def packed_linear(x: BitTensor, w: BitTensor, alpha: np.ndarray, scale=None, shift=None,
                  threshold=None) -> np.ndarray:
    """Binary linear layer on packed operands, then alpha and the folded BN affine."""
    if x.n != w.n:
        raise PackError(f"input length {x.n} != weight length {w.n}")
    acc = xnor_popcount_matmul(x.words, w.words, x.n)
    y = acc.astype(np.float32) * np.asarray(alpha, dtype=np.float32)
    return _affine(y, scale, shift, threshold)


def packed_conv2d(x, w: BitTensor, alpha: np.ndarray, kernel_size: int, stride: int = 1, pad: int = 0,
                  scale=None, shift=None, threshold=None) -> np.ndarray:
    """Binary convolution: ±1 input (N, C, H, W), packed weight rows (O, C*k*k).

    The input may be given packed (a BitTensor of shape (N, C, H, W)) or as
    a dense ±1 array.  Patches are gathered with im2col and packed per row,
    with zero padding tracked in a validity mask.
    """
    if isinstance(x, BitTensor):
        x = unpack(x)
    n, c, h, wd = x.shape
    k = kernel_size
    if c * k * k != w.n:
        raise PackError(f"input channels {c} with kernel {k} do not match weight rows of length {w.n}")
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)
    cols = im2col(x, k, stride, pad)
    bits = _pack_bits(cols > 0)
    valid = _pack_bits(cols != 0) if pad else None
    acc = xnor_popcount_matmul(bits, w.words, w.n, valid)
    y = acc.astype(np.float32) * np.asarray(alpha, dtype=np.float32)
    y = y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return _affine(y, scale, shift, threshold)


# ---------------------------------------------------------------- packed model

K_LINEAR, K_CONV, K_PLINEAR, K_PCONV, K_BNSIGN, K_BN, K_MAXPOOL, K_AVGPOOL, K_FLATTEN, K_BLINEAR, K_BCONV = range(1, 12)


@dataclass
class Stage:
    kind: int
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


class PackedModel:
    """Immutable inference pipeline produced by :func:`export_packed`."""

    def __init__(self, input_shape: tuple[int, ...], stages: list[Stage]):
        self.input_shape = tuple(input_shape)
        self.stages = stages

    def run(self, x: np.ndarray, collect: bool = False):
        """Logits for ``x``; with ``collect`` also the list of binary activations."""
        acts = []
        for st in self.stages:
            a, m = st.arrays, st.meta
            if st.kind == K_LINEAR:
                x = linear_forward(x, a["weight"], False)
            elif st.kind == K_CONV:
                x = conv2d_forward(x, a["weight"], False, m["stride"], m["pad"])
            elif st.kind == K_BLINEAR:
                w = unpack(BitTensor((m["out"], m["in"]), a["words"]))
                x = linear_forward(x, w, False) * a["alpha"]
            elif st.kind == K_BCONV:
                w = unpack(BitTensor((m["out"], m["in"] * m["k"] ** 2), a["words"]))
                w = w.reshape(m["out"], m["in"], m["k"], m["k"])
                x = conv2d_forward(x, w, False, m["stride"], m["pad"]) * a["alpha"].reshape(1, -1, 1, 1)
            elif st.kind == K_PLINEAR:
                w = BitTensor((m["out"], m["in"]), a["words"])
                x = packed_linear(pack(x), w, a["alpha"])
            elif st.kind == K_PCONV:
                w = BitTensor((m["out"], m["in"] * m["k"] ** 2), a["words"])
                x = packed_conv2d(x, w, a["alpha"], m["k"], m["stride"], m["pad"])
            elif st.kind in (K_BNSIGN, K_BN):
                shape = [1] * x.ndim
                shape[1] = -1
                x = x.astype(np.float64) * a["scale"].reshape(shape) + a["shift"].reshape(shape)
                if st.kind == K_BNSIGN:
                    x = nn.sign_forward(x, 0.0)
                    acts.append(x)
            elif st.kind == K_MAXPOOL:
                x = nn.maxpool2x2(x)
            elif st.kind == K_AVGPOOL:
                x = nn.avgpool2x2(x)
            elif st.kind == K_FLATTEN:
                x = x.reshape(x.shape[0], -1)
        return (x, acts) if collect else x

    def predict(self, x: np.ndarray, batch: int = 1000) -> np.ndarray:
        return np.concatenate([self.run(x[s:s + batch]).argmax(axis=1) for s in range(0, len(x), batch)])

    # serialization

    def to_bytes(self) -> bytes:
        f = io.BytesIO()
        f.write(PACK_MAGIC)
        f.write(struct.pack("<II", PACK_VERSION, len(self.input_shape)))
        f.write(struct.pack(f"<{len(self.input_shape)}I", *self.input_shape))
        f.write(struct.pack("<I", len(self.stages)))
        for st in self.stages:
            _write_stage(f, st)
        return f.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PackedModel":
        if buf[:8] != PACK_MAGIC:
            raise PackError("not a packed model file (bad magic)")
        f = io.BytesIO(buf)
        f.seek(8)
        version, rank = struct.unpack("<II", f.read(8))
        if version != PACK_VERSION:
            raise PackError(f"unsupported packed model version {version}")
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        (count,) = struct.unpack("<I", f.read(4))
        stages = [_read_stage(f) for _ in range(count)]
        if f.read(1):
            raise PackError("trailing bytes after last stage")
        return cls(shape, stages)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PackedModel":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


# meta fields (all u32) and arrays (dtype, length from meta) per stage kind
_LAYOUT = {
    K_LINEAR: (("out", "in"), (("weight", "<f4", lambda m: (m["out"], m["in"])),)),
    K_CONV: (("out", "in", "k", "stride", "pad"), (("weight", "<f4", lambda m: (m["out"], m["in"], m["k"], m["k"])),)),
    K_PLINEAR: (("out", "in", "nwords"), (("words", "<u8", lambda m: (m["out"], m["nwords"])),
                                          ("alpha", "<f4", lambda m: (m["out"],)))),
    K_PCONV: (("out", "in", "k", "stride", "pad", "nwords"),
              (("words", "<u8", lambda m: (m["out"], m["nwords"])),
               ("alpha", "<f4", lambda m: (m["out"],)))),
    K_BLINEAR: (("out", "in", "nwords"), (("words", "<u8", lambda m: (m["out"], m["nwords"])),
                                          ("alpha", "<f4", lambda m: (m["out"],)))),
    K_BCONV: (("out", "in", "k", "stride", "pad", "nwords"),
              (("words", "<u8", lambda m: (m["out"], m["nwords"])),
               ("alpha", "<f4", lambda m: (m["out"],)))),
    K_BNSIGN: (("channels",), (("scale", "<f8", lambda m: (m["channels"],)),
                               ("shift", "<f8", lambda m: (m["channels"],)))),
    K_BN: (("channels",), (("scale", "<f8", lambda m: (m["channels"],)),
                           ("shift", "<f8", lambda m: (m["channels"],)))),
    K_MAXPOOL: ((), ()),
    K_AVGPOOL: ((), ()),
    K_FLATTEN: ((), ()),
}


def _write_stage(f, st: Stage):
    metas, arrays = _LAYOUT[st.kind]
    f.write(struct.pack("<B", st.kind))
    f.write(struct.pack(f"<{len(metas)}I", *(int(st.meta[k]) for k in metas)))
    for name, dtype, shape in arrays:
        f.write(np.ascontiguousarray(st.arrays[name], dtype=dtype).reshape(shape(st.meta)).tobytes())


def _read_stage(f) -> Stage:
    raw = f.read(1)
    if not raw:
        raise PackError("truncated packed model")
    kind = raw[0]
    if kind not in _LAYOUT:
        raise PackError(f"unknown stage kind {kind}")
    metas, arrays = _LAYOUT[kind]
    vals = struct.unpack(f"<{len(metas)}I", f.read(4 * len(metas)))
    meta = dict(zip(metas, vals))
    out = {}
    for name, dtype, shape in arrays:
        shp = shape(meta)
        size = int(np.prod(shp))
        buf = f.read(size * np.dtype(dtype).itemsize)
        if len(buf) != size * np.dtype(dtype).itemsize:
            raise PackError(f"truncated array {name!r}")
        out[name] = np.frombuffer(buf, dtype=dtype).reshape(shp).astype(np.dtype(dtype).newbyteorder("="))
    return Stage(kind, out, meta)


def export_packed(model: Model) -> PackedModel:
    """Fold thresholds, binarize weights and pack every binary weight.

    Layers with binary input run on XNOR-popcount.  A binary layer with real
    input (the first layer) stores packed weights but unpacks them and runs
    the float product; real-weight layers are stored as float32.
    """
    if model.spec.precision != "binary":
        raise PackError(f"model precision is {model.spec.precision!r}: nothing to pack")
    model = copy.deepcopy(model)
    model.eval()
    fold_thresholds(model)
    layers = model.net.layers
    stages = []
    binary_in = False
    i = 0
    while i < len(layers):
        name, layer = layers[i]
        nxt = layers[i + 1][1] if i + 1 < len(layers) else None
        if isinstance(layer, Linear):
            w = layer.weight.value
            if layer.binary:
                b, alpha = binarize_weights(w)
                bt = pack(b)
                stages.append(Stage(K_PLINEAR if binary_in else K_BLINEAR, {"words": bt.words, "alpha": alpha},
                                    {"out": w.shape[0], "in": w.shape[1], "nwords": bt.nwords}))
            else:
                stages.append(Stage(K_LINEAR, {"weight": w}, {"out": w.shape[0], "in": w.shape[1]}))
            binary_in = False
        elif isinstance(layer, Conv2d):
            w = layer.weight.value
            meta = {"out": w.shape[0], "in": w.shape[1], "k": layer.k, "stride": layer.stride, "pad": layer.pad}
            if layer.binary:
                b, alpha = binarize_weights(w)
                bt = pack(b.reshape(w.shape[0], -1))
                stages.append(Stage(K_PCONV if binary_in else K_BCONV, {"words": bt.words, "alpha": alpha},
                                    {**meta, "nwords": bt.nwords}))
            else:
                stages.append(Stage(K_CONV, {"weight": w}, meta))
            binary_in = False
        elif isinstance(layer, BatchNorm):
            scale, shift = layer.eval_affine()
            if isinstance(nxt, SignAct):
                stages.append(Stage(K_BNSIGN, {"scale": scale, "shift": shift}, {"channels": layer.channels}))
                binary_in = True
                i += 1
            else:
                stages.append(Stage(K_BN, {"scale": scale, "shift": shift}, {"channels": layer.channels}))
                binary_in = False
        elif isinstance(layer, (MaxPool2x2, AvgPool2x2)):
            stages.append(Stage(K_MAXPOOL if isinstance(layer, MaxPool2x2) else K_AVGPOOL))
        elif isinstance(layer, Flatten):
            stages.append(Stage(K_FLATTEN))
        else:
            raise PackError(f"layer {name} ({type(layer).__name__}) has no packed form")
        i += 1
    return PackedModel(model.spec.shape_in, stages)


def reference_activations(model: Model, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Eval-mode logits and each sign activation's output, via the float path."""
    if not isinstance(model.net, Sequential):
        raise PackError("reference walk needs a sequential model")
    model.eval()
    acts = []
    for _, layer in model.net.layers:
        x = layer.forward(x)
        if isinstance(layer, SignAct):
            acts.append(x)
    return x, acts


def run_batched(packed: PackedModel, x: np.ndarray, batch: int = 500, collect: bool = False):
    """Predictions for ``x`` and, with ``collect``, each binary activation concatenated over batches."""
    preds, acts = [], []
    for s in range(0, len(x), batch):
        logits, a = packed.run(x[s:s + batch], collect=True)
        preds.append(logits.argmax(axis=1))
        if collect:
            acts.append(a)
    merged = [np.concatenate(layer) for layer in zip(*acts)] if collect else []
    return np.concatenate(preds), merged


def run_reference_batched(model: Model, x: np.ndarray, batch: int = 500):
    """Same as :func:`run_batched` through the float training-path model in eval mode."""
    preds, acts = [], []
    for s in range(0, len(x), batch):
        logits, a = reference_activations(model, x[s:s + batch])
        preds.append(logits.argmax(axis=1))
        acts.append(a)
    return np.concatenate(preds), [np.concatenate(layer) for layer in zip(*acts)]


class Timer:
    """Wall-clock timer for ``with`` blocks; no performance claims attached."""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        return False
