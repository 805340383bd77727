"""Shared test utilities: small random networks and a finite-difference gradient check."""
from __future__ import annotations

import numpy as np

from shiftbnn.nn import (AvgPool2x2, BatchNorm, ChannelPadShortcut, Conv2d, Flatten, GenHardtanh, GenHardtanhConfig,
                         LeakyReLU, Linear, MaxPool2x2, PReLU, Residual, Sequential, SignAct, SignActConfig,
                         named_layers, named_params, set_dtype, set_surrogate, set_training, softmax_xent)


def small_mlp(rng, shift=0.3, trainable=True):
    cfg = SignActConfig(threshold_shift=shift, trainable=trainable, per_channel=trainable)
    return Sequential([
        ("flatten", Flatten()),
        ("fc1", Linear(12, 16, True, rng)),
        ("bn1", BatchNorm(16)),
        ("act1", SignAct(cfg, 16)),
        ("fc2", Linear(16, 4, True, rng)),
        ("bn2", BatchNorm(4)),
    ]), (3, 2, 2)


def small_cnn(rng, shift=-0.2, pool="max"):
    cfg = SignActConfig(threshold_shift=shift, trainable=True, per_channel=True)
    return Sequential([
        ("conv1", Conv2d(2, 4, 3, 1, 1, False, rng)),
        ("bn1", BatchNorm(4)),
        ("act1", SignAct(cfg, 4)),
        ("conv2", Conv2d(4, 6, 3, 1, 1, True, rng)),
        ("pool2", MaxPool2x2() if pool == "max" else AvgPool2x2()),
        ("bn2", BatchNorm(6)),
        ("act2", SignAct(cfg, 6)),
        ("flatten", Flatten()),
        ("fc3", Linear(6 * 2 * 2, 5, True, rng)),
        ("bn3", BatchNorm(5)),
    ]), (2, 4, 4)


def small_resnet(rng, extra="prelu"):
    cfg = SignActConfig(threshold_shift=0.4, trainable=True, per_channel=True)
    post = PReLU(6) if extra == "prelu" else LeakyReLU(0.3)
    body = Sequential([("act", SignAct(cfg, 3)), ("conv", Conv2d(3, 6, 3, 2, 1, True, rng)), ("bn", BatchNorm(6))])
    body2 = Sequential([("act", GenHardtanh(GenHardtanhConfig(0.5, 0.2, 1.5))), ("conv", Conv2d(6, 6, 3, 1, 1, True, rng)),
                        ("bn", BatchNorm(6))])
    return Sequential([
        ("conv0", Conv2d(1, 3, 3, 1, 1, False, rng)),
        ("bn0", BatchNorm(3)),
        ("block1", Residual(body, ChannelPadShortcut(3, 6, True), post)),
        ("block2", Residual(body2)),
        ("flatten", Flatten()),
        ("fc", Linear(6 * 2 * 2, 3, False, rng)),
        ("bn_out", BatchNorm(3)),
    ]), (1, 4, 4)


def _signature(net):
    """Which linear piece every piecewise layer is on, for the last forward pass."""
    sig = []
    for _, layer in named_layers(net):
        if isinstance(layer, SignAct):
            th = layer.th if layer.cfg.per_channel else layer.th[0]
            th = th.reshape(1, -1, *([1] * (layer._x.ndim - 2))) if np.ndim(th) else th
            z = layer._x - th
            sig += [z > -layer.cfg.ste_clip, z < layer.cfg.ste_clip]
        elif isinstance(layer, GenHardtanh):
            z = layer._x - layer.cfg.x_offset
            sig += [z > -layer.cfg.range, z < layer.cfg.range]
        elif isinstance(layer, (LeakyReLU, PReLU)):
            sig.append(layer._x > 0)
        elif isinstance(layer, MaxPool2x2):
            sig.append(layer._idx.copy())
    return sig


def _loss(net, x, y):
    loss, _ = softmax_xent(net.forward(x), y)
    return loss, _signature(net)


def gradcheck(net, x, y, h=1e-6, rtol=1e-3, atol=1e-9):
    """Compare analytic and central-difference gradients of the surrogate loss.

    Returns ``(checked, skipped, failures)``; parameters whose perturbation
    moves any activation across a kink are skipped.
    """
    set_surrogate(net, True)
    set_dtype(net, np.float64)
    set_training(net, True)
    x = x.astype(np.float64)
    params = named_params(net)
    for p in params.values():
        p.zero_grad()
    _, grad = softmax_xent(net.forward(x), y)
    base_sig = _signature(net)
    net.backward(grad)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    checked, skipped, failures = 0, 0, []
    for name, p in params.items():
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp, sp = _loss(net, x, y)
            flat[i] = old - h
            lm, sm = _loss(net, x, y)
            flat[i] = old
            if any(not np.array_equal(a, b) for a, b in zip(sp + sm, base_sig + base_sig)):
                skipped += 1
                continue
            num = (lp - lm) / (2 * h)
            ana = analytic[name].reshape(-1)[i]
            checked += 1
            if abs(ana - num) > rtol * max(abs(ana), abs(num)) + atol:
                failures.append((name, i, ana, num))
    return checked, skipped, failures


def param_count(net) -> int:
    return sum(p.value.size for p in named_params(net).values())
