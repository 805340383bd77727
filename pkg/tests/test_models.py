import dataclasses

import numpy as np
import pytest

from shiftbnn.models import (CheckpointError, ModelSpec, build, decode_checkpoint, encode_checkpoint,
                             fold_thresholds, init_from_pretrained)
from shiftbnn.nn import BatchNorm, ConfigError, Conv2d, FoldError, GenHardtanhConfig, Residual
from shiftbnn.nn.activations import SignActConfig
from shiftbnn.nn.container import named_layers


def test_mlp2_structure():
    m = build(ModelSpec(arch="mlp2"), 0)
    kinds = [type(layer).__name__ for _, layer in m.net.layers]
    assert kinds.count("Linear") == 2 and kinds.count("BatchNorm") == 2 and kinds.count("SignAct") == 1
    assert [n for n, _ in m.net.layers] == ["flatten", "fc1", "bn1", "act1", "fc2", "bn2"]
    assert m.net["fc1"].binary and m.net["fc2"].binary


def _vgg_count(c_in=3, hw=32, classes=10):
    convs = [(c_in, 64), (64, 64), (64, 128), (128, 128)]
    n = sum(9 * a * b for a, b in convs)
    fcs = [(128 * (hw // 8) ** 2, 512), (512, 512), (512, classes)]
    n += sum(a * b for a, b in fcs)
    bn_channels = 64 + 64 + 128 + 128 + 512 + 512 + classes
    return n + 2 * bn_channels


def test_vggsmall_param_count():
    m = build(ModelSpec(arch="vggsmall"), 0)
    assert m.num_params() == _vgg_count()
    assert not m.net["conv1"].binary and m.net["conv2"].binary and not m.net["fc7"].binary


def test_vggsmall_pools_after_latter_three_convs():
    m = build(ModelSpec(arch="vggsmall"), 0)
    names = [n for n, _ in m.net.layers]
    for i in (2, 3, 4):
        assert names.index(f"pool{i}") == names.index(f"conv{i}") + 1
    assert "pool1" not in names


def test_lenet5_shapes():
    m = build(ModelSpec(arch="lenet5"), 0)
    out = m.forward(np.zeros((2, 1, 28, 28), np.float32))
    assert out.shape == (2, 10)
    assert len(m.sign_layers()) == 4
    assert m.net["fc3"].in_features == 16 * 4 * 4


def test_resnet20ds_structure():
    m = build(ModelSpec(arch="resnet20ds"), 0)
    convs = [layer for _, layer in named_layers(m.net) if isinstance(layer, Conv2d)]
    assert len(convs) == 19
    assert len(m.sign_layers()) == 18
    assert m.forward(np.zeros((2, 3, 32, 32), np.float32)).shape == (2, 10)


def test_resnet_leaky_one_matches_no_extra_act():
    x = np.random.default_rng(0).normal(size=(4, 3, 16, 16)).astype(np.float32)
    base = ModelSpec(arch="resnet20ds", width=0.5, input_shape=(3, 16, 16))
    a = build(base, 3)
    b = build(dataclasses.replace(base, extra_act="leaky", leaky_slope=1.0), 3)
    assert np.array_equal(a.forward(x), b.forward(x))


def test_resnet_shortcuts_are_live():
    spec = ModelSpec(arch="resnet20ds", width=0.5, input_shape=(3, 16, 16))
    x = np.random.default_rng(1).normal(size=(4, 3, 16, 16)).astype(np.float32)
    full = build(spec, 0).forward(x)
    cut = build(spec, 0)
    for _, layer in cut.net.layers:
        if isinstance(layer, Residual):
            layer.shortcut = _ZeroLike()
    assert not np.allclose(cut.forward(x), full)


class _ZeroLike:
    """Shortcut replacement whose output is all zeros in the body's output shape."""

    def forward(self, x):
        return 0.0


def test_same_seed_same_init():
    a = build(ModelSpec(arch="vggsmall", width=0.25), 5).state_dict()
    b = build(ModelSpec(arch="vggsmall", width=0.25), 5).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = build(ModelSpec(arch="vggsmall", width=0.25), 6).state_dict()
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(arch="mlp2", extra_act="leaky")
    with pytest.raises(ConfigError):
        ModelSpec(arch="resnet20ds", pooling="avg")
    with pytest.raises(ConfigError):
        ModelSpec(precision="fp", activation="sign")
    with pytest.raises(ConfigError):
        ModelSpec(arch="alexnet")
    with pytest.raises(ConfigError):
        build(ModelSpec(arch="vggsmall", input_shape=(3, 28, 28)))


def test_spec_dict_roundtrip():
    spec = ModelSpec(arch="vggsmall", pooling="avg", sign=SignActConfig(1.2, True, True, 0.5), width=0.5)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_checkpoint_roundtrip():
    m = build(ModelSpec(arch="lenet5"), 0)
    state = m.state_dict()
    back = decode_checkpoint(encode_checkpoint(state))
    assert list(back) == list(state)
    assert all(back[k].tobytes() == state[k].astype(np.float32).tobytes() for k in state)
    m2 = build(ModelSpec(arch="lenet5"), 1)
    m2.load_state_dict(back)
    assert all(m2.state_dict()[k].tobytes() == state[k].tobytes() for k in state)


def test_checkpoint_errors():
    state = build(ModelSpec(arch="mlp2"), 0).state_dict()
    buf = encode_checkpoint(state)
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXXXXXX" + buf[8:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf[:8] + (2).to_bytes(4, "little") + buf[12:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf[:-10])
    with pytest.raises(CheckpointError):
        build(ModelSpec(arch="lenet5"), 0).load_state_dict(state)


def test_init_from_pretrained():
    fp_spec = ModelSpec(arch="vggsmall", precision="fp", activation="gen_hardtanh",
                        hardtanh=GenHardtanhConfig(x_offset=1.0), width=0.25)
    fp = build(fp_spec, 0)
    for name, p in fp.params().items():
        p.value = p.value + 0.01
    fp_state = fp.state_dict()
    binary = build(ModelSpec(arch="vggsmall", sign=SignActConfig(0.6), width=0.25), 1)
    init_from_pretrained(binary, fp_state, 1.0)
    own = binary.state_dict()
    assert all(own[k].tobytes() == fp_state[k].tobytes() for k in fp_state)
    assert all(np.all(layer.th == np.float32(0.6)) for _, layer in binary.sign_layers())
    assert binary.pretrained_shift == 1.0
    with pytest.raises(CheckpointError):
        init_from_pretrained(build(ModelSpec(arch="lenet5"), 0), fp_state, 1.0)


def test_fold_thresholds_refuses_without_batch_norm():
    m = build(ModelSpec(arch="mlp2"), 0)
    m.net.layers = [(n, layer) for n, layer in m.net.layers if n != "bn1"]
    with pytest.raises(FoldError, match="act1"):
        fold_thresholds(m)


def test_fold_thresholds_whole_model():
    spec = ModelSpec(arch="vggsmall", sign=SignActConfig(0.8), width=0.25, input_shape=(3, 16, 16))
    m = build(spec, 0)
    rng = np.random.default_rng(0)
    for _, layer in m.net.layers:
        if isinstance(layer, BatchNorm):
            layer.running_mean = rng.normal(size=layer.channels).astype(np.float32)
    x = rng.normal(size=(8, 3, 16, 16)).astype(np.float32)
    before = m.forward(x)
    fold_thresholds(m)
    assert np.array_equal(before, m.forward(x))
