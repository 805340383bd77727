"""Network builders and the checkpoint file format.

Architectures
-------------
``mlp2``       FC512 - BN - act - FC10 - BN
``lenet5``     conv6@5x5 - pool - BN - act - conv16@5x5 - pool - BN - act -
               FC120 - BN - act - FC84 - BN - act - FC10 - BN
``vggsmall``   conv64 - BN - act - conv64 - pool - BN - act - conv128 - pool -
               BN - act - conv128 - pool - BN - act - FC512 - BN - act -
               FC512 - BN - act - FC10 - BN
``resnet20ds`` conv16 - BN, then 18 blocks ``act - conv - BN (+ shortcut)``
               with an optional extra activation after each addition, then
               global average pool - FC10 - BN

Checkpoint format (little-endian)::

    b"SBNNCKPT" | u32 version | u32 count |
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u32 dim | float32 data )
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import (AvgPool2x2, BatchNorm, ChannelPadShortcut, Conv2d, Flatten, GenHardtanh, GlobalAvgPool,
                 LeakyReLU, Linear, MaxPool2x2, PReLU, Residual, Sequential, SignAct)
from .nn.activations import RELU6, ConfigError, GenHardtanhConfig, SignActConfig

ARCHS = ("mlp2", "lenet5", "vggsmall", "resnet20ds")
PRECISIONS = ("fp", "binary-weight", "binary")
ACTIVATIONS = ("sign", "gen_hardtanh", "relu6")

CKPT_MAGIC = b"SBNNCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "mlp2"
    precision: str = "binary"
    activation: str = "sign"
    sign: SignActConfig = field(default_factory=SignActConfig)
    hardtanh: GenHardtanhConfig = field(default_factory=GenHardtanhConfig)
    pooling: str = "max"
    extra_act: str = "none"
    leaky_slope: float = 0.0
    # None picks the per-architecture default (see ``first_last_binary``)
    binarize_first_last: bool | None = None
    # channel / width multiplier for desk-scale runs
    width: float = 1.0
    input_shape: tuple[int, int, int] | None = None
    num_classes: int = 10

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if (self.activation == "sign") != (self.precision == "binary"):
            raise ConfigError("sign activation goes with precision 'binary' and only with it")
        if self.pooling not in ("max", "avg"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.pooling != "max" and self.arch not in ("vggsmall", "lenet5"):
            raise ConfigError(f"pooling choice only applies to vggsmall/lenet5, not {self.arch}")
        if self.extra_act not in ("none", "prelu", "leaky"):
            raise ConfigError(f"unknown extra_act {self.extra_act!r}")
        if self.extra_act != "none" and self.arch != "resnet20ds":
            raise ConfigError("extra_act is only valid for resnet20ds")
        if not self.width > 0:
            raise ConfigError("width must be > 0")

    @property
    def shape_in(self) -> tuple[int, int, int]:
        if self.input_shape is not None:
            return tuple(self.input_shape)
        return (1, 28, 28) if self.arch in ("mlp2", "lenet5") else (3, 32, 32)

    @property
    def first_last_binary(self) -> bool:
        if self.binarize_first_last is not None:
            return self.binarize_first_last
        # mlp2 only has a first and a last layer
        return self.arch == "mlp2"

    def with_shift(self, shift: float) -> "ModelSpec":
        if self.activation == "sign":
            return dataclasses.replace(self, sign=dataclasses.replace(self.sign, threshold_shift=shift))
        if self.activation == "gen_hardtanh":
            return dataclasses.replace(self, hardtanh=dataclasses.replace(self.hardtanh, x_offset=shift))
        raise ConfigError("relu6 has no shift")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["sign"] = SignActConfig(**d.get("sign", {}))
        d["hardtanh"] = GenHardtanhConfig(**d.get("hardtanh", {}))
        if d.get("input_shape") is not None:
            d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


class Model:
    """A built network plus the ModelSpec it was built from."""

    def __init__(self, spec: ModelSpec, net: Sequential):
        self.spec = spec
        self.net = net
        self.pretrained_shift = None
        self.eval()

    def forward(self, x):
        return self.net.forward(x)

    __call__ = forward

    def backward(self, grad):
        return self.net.backward(grad)

    def train(self):
        nn.set_training(self.net, True)
        self.training = True
        return self

    def eval(self):
        nn.set_training(self.net, False)
        self.training = False
        return self

    def params(self) -> dict[str, nn.Param]:
        return nn.named_params(self.net)

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def sign_layers(self) -> list[tuple[str, SignAct]]:
        return [(n, layer) for n, layer in nn.named_layers(self.net) if isinstance(layer, SignAct)]

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.value.copy() for k, p in self.params().items()}
        out.update({k: np.array(v) for k, v in nn.named_buffers(self.net).items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        params = self.params()
        buffers = nn.named_buffers(self.net)
        expected = set(params) | set(buffers)
        if strict and set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        layers = dict(nn.named_layers(self.net))
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.value.shape != value.shape:
                    raise CheckpointError(f"{name}: shape {value.shape} != {p.value.shape}")
                p.value = np.array(value, dtype=p.value.dtype)
            elif name in buffers:
                if buffers[name].shape != value.shape:
                    raise CheckpointError(f"{name}: shape {value.shape} != {buffers[name].shape}")
                lname, _, bname = name.rpartition(".")
                layers[lname].set_buffer(bname, value)
            elif strict:
                raise CheckpointError(f"unexpected entry {name}")


def _activation(spec: ModelSpec, channels: int):
    if spec.activation == "sign":
        return SignAct(spec.sign, channels)
    if spec.activation == "relu6":
        return GenHardtanh(RELU6)
    return GenHardtanh(spec.hardtanh)


def _w(spec: ModelSpec, n: int) -> int:
    return max(1, int(round(n * spec.width)))


def _pool(spec: ModelSpec):
    return MaxPool2x2() if spec.pooling == "max" else AvgPool2x2()


def _build_mlp2(spec, rng, bin_mid, bin_fl):
    c, h, w = spec.shape_in
    hid = _w(spec, 512)
    return [
        ("flatten", Flatten()),
        ("fc1", Linear(c * h * w, hid, bin_fl, rng)),
        ("bn1", BatchNorm(hid)),
        ("act1", _activation(spec, hid)),
        ("fc2", Linear(hid, spec.num_classes, bin_fl, rng)),
        ("bn2", BatchNorm(spec.num_classes)),
    ]


def _build_lenet5(spec, rng, bin_mid, bin_fl):
    c, h, w = spec.shape_in
    c1, c2 = _w(spec, 6), _w(spec, 16)
    f3, f4 = _w(spec, 120), _w(spec, 84)
    hs, ws = ((h - 4) // 2 - 4) // 2, ((w - 4) // 2 - 4) // 2
    return [
        ("conv1", Conv2d(c, c1, 5, 1, 0, bin_fl, rng)),
        ("pool1", _pool(spec)),
        ("bn1", BatchNorm(c1)),
        ("act1", _activation(spec, c1)),
        ("conv2", Conv2d(c1, c2, 5, 1, 0, bin_mid, rng)),
        ("pool2", _pool(spec)),
        ("bn2", BatchNorm(c2)),
        ("act2", _activation(spec, c2)),
        ("flatten", Flatten()),
        ("fc3", Linear(c2 * hs * ws, f3, bin_mid, rng)),
        ("bn3", BatchNorm(f3)),
        ("act3", _activation(spec, f3)),
        ("fc4", Linear(f3, f4, bin_mid, rng)),
        ("bn4", BatchNorm(f4)),
        ("act4", _activation(spec, f4)),
        ("fc5", Linear(f4, spec.num_classes, bin_fl, rng)),
        ("bn5", BatchNorm(spec.num_classes)),
    ]


def _build_vggsmall(spec, rng, bin_mid, bin_fl):
    c, h, w = spec.shape_in
    c64, c128, f512 = _w(spec, 64), _w(spec, 128), _w(spec, 512)
    layers = [
        ("conv1", Conv2d(c, c64, 3, 1, 1, bin_fl, rng)),
        ("bn1", BatchNorm(c64)),
        ("act1", _activation(spec, c64)),
    ]
    cin = c64
    for i, cout in ((2, c64), (3, c128), (4, c128)):
        layers += [
            (f"conv{i}", Conv2d(cin, cout, 3, 1, 1, bin_mid, rng)),
            (f"pool{i}", _pool(spec)),
            (f"bn{i}", BatchNorm(cout)),
            (f"act{i}", _activation(spec, cout)),
        ]
        cin = cout
    layers += [
        ("flatten", Flatten()),
        ("fc5", Linear(cin * (h // 8) * (w // 8), f512, bin_mid, rng)),
        ("bn5", BatchNorm(f512)),
        ("act5", _activation(spec, f512)),
        ("fc6", Linear(f512, f512, bin_mid, rng)),
        ("bn6", BatchNorm(f512)),
        ("act6", _activation(spec, f512)),
        ("fc7", Linear(f512, spec.num_classes, bin_fl, rng)),
        ("bn7", BatchNorm(spec.num_classes)),
    ]
    return layers


def _extra_act(spec, channels):
    if spec.extra_act == "leaky":
        return LeakyReLU(spec.leaky_slope)
    if spec.extra_act == "prelu":
        return PReLU(channels)
    return None


def _build_resnet20ds(spec, rng, bin_mid, bin_fl):
    c, h, w = spec.shape_in
    widths = [_w(spec, 16), _w(spec, 32), _w(spec, 64)]
    layers = [
        ("conv0", Conv2d(c, widths[0], 3, 1, 1, bin_fl, rng)),
        ("bn0", BatchNorm(widths[0])),
    ]
    cin = widths[0]
    k = 1
    for stage, cout in enumerate(widths):
        for j in range(6):
            down = stage > 0 and j == 0
            body = Sequential([
                ("act", _activation(spec, cin)),
                ("conv", Conv2d(cin, cout, 3, 2 if down else 1, 1, bin_mid, rng)),
                ("bn", BatchNorm(cout)),
            ])
            shortcut = ChannelPadShortcut(cin, cout, down) if down or cin != cout else None
            layers.append((f"block{k}", Residual(body, shortcut, _extra_act(spec, cout))))
            cin = cout
            k += 1
    layers += [
        ("gap", GlobalAvgPool()),
        ("fc", Linear(cin, spec.num_classes, bin_fl, rng)),
        ("bn_out", BatchNorm(spec.num_classes)),
    ]
    return layers


_BUILDERS = {
    "mlp2": _build_mlp2,
    "lenet5": _build_lenet5,
    "vggsmall": _build_vggsmall,
    "resnet20ds": _build_resnet20ds,
}


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Construct the network described by ``spec``; weights are Xavier-normal from ``seed``."""
    rng = np.random.default_rng(seed)
    bin_mid = spec.precision in ("binary-weight", "binary")
    bin_fl = bin_mid and spec.first_last_binary
    c, h, w = spec.shape_in
    if spec.arch == "vggsmall" and (h % 8 or w % 8):
        raise ConfigError(f"vggsmall needs spatial dims divisible by 8, got {h}x{w}")
    return Model(spec, Sequential(_BUILDERS[spec.arch](spec, rng, bin_mid, bin_fl)))


def fold_thresholds(model: Model):
    """Fold every sign threshold into the batch norm right before it."""
    for qname, layer in nn.named_layers(model.net):
        if not isinstance(layer, Sequential):
            continue
        prev = None
        for name, child in layer.layers:
            if isinstance(child, SignAct):
                full = f"{qname}.{name}" if qname else name
                if not isinstance(prev, BatchNorm):
                    raise nn.FoldError(f"activation {full} is not preceded by a batch norm")
                nn.fold_bn_sign(prev, child)
            prev = child


def init_from_pretrained(model: Model, fp_state: dict[str, np.ndarray], fp_shift: float) -> Model:
    """Copy weights and batch-norm state from a full-precision checkpoint.

    The sign thresholds of ``model`` keep their own shift; ``fp_shift`` (the
    hardtanh offset the checkpoint was trained with) is only recorded.
    """
    own = model.state_dict()
    thresholds = {n for n in own if n.endswith(".threshold")}
    wanted = set(own) - thresholds
    if set(fp_state) != wanted:
        raise CheckpointError(f"pretrained checkpoint does not match architecture "
                              f"({len(fp_state)} tensors vs {len(wanted)} expected)")
    model.load_state_dict(fp_state, strict=False)
    model.pretrained_shift = fp_shift
    return model


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(encode_checkpoint(state))


def encode_checkpoint(state: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, value in state.items():
        raw = name.encode()
        value = np.asarray(value, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode()
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(buf):
                raise CheckpointError(f"truncated tensor {name!r} at offset {off}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint at offset {off}") from e
    return out


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
