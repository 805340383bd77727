"""Layers with hand-derived backward passes."""
from .activations import (RELU6, ConfigError, GenHardtanh, GenHardtanhConfig, LeakyReLU, PReLU, SignAct,
                          SignActConfig, gen_hardtanh_backward, gen_hardtanh_forward, leaky_relu, sign_backward,
                          sign_forward)
from .base import Layer, Param, channel_sum
from .container import (ChannelPadShortcut, Residual, Sequential, named_buffers, named_layers, named_params,
                        set_dtype, set_surrogate, set_training)
from .fold import FoldError, fold_bn_sign, fold_threshold
from .layers import (AvgPool2x2, BatchNorm, Flatten, GlobalAvgPool, MaxPool2x2, avgpool2x2, batchnorm_forward,
                     maxpool2x2, softmax_xent)
from .linear import (Conv2d, Linear, binarize_weights, col2im, conv2d_forward, effective_weight, im2col,
                     linear_forward)
