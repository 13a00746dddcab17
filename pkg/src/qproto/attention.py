"""Convolutional block attention: channel-wise then spatial-wise gating.

Channel attention squeezes space with global max and average pooling,
pushes both through one shared two-layer MLP and sums before the sigmoid.
Spatial attention squeezes channels with max and average, concatenates
the two maps and mixes them with a 1x1 convolution. Both gates are
sigmoid-bounded, so they scale features without flipping signs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

LEAKY_SLOPE = 0.2


@dataclass
class AttentionParams:
    """Shared-MLP channel gate plus 1x1-conv spatial gate (symbolically the
    attention parameter group)."""
    mlp_w1: Tensor  # (c/r, c)
    mlp_b1: Tensor
    mlp_w2: Tensor  # (c, c/r)
    mlp_b2: Tensor
    conv_w: Tensor  # (1, 2, 1, 1)
    conv_b: Tensor
    reduction: int

    def parameters(self):
        return [
            ("attn.mlp_w1", self.mlp_w1),
            ("attn.mlp_b1", self.mlp_b1),
            ("attn.mlp_w2", self.mlp_w2),
            ("attn.mlp_b2", self.mlp_b2),
            ("attn.conv_w", self.conv_w),
            ("attn.conv_b", self.conv_b),
        ]


def build_attention(width, reduction, rng_seed=0):
    """Initialize attention parameters for ``width`` channels."""
    if width % reduction != 0:
        raise ConfigError(f"attention: width {width} not divisible by reduction {reduction}")
    rng = np.random.default_rng(rng_seed)
    hidden = width // reduction

    def uniform(shape, fan_in):
        limit = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-limit, limit, shape), requires_grad=True)

    return AttentionParams(
        mlp_w1=uniform((hidden, width), width),
        mlp_b1=uniform((hidden,), width),
        mlp_w2=uniform((width, hidden), hidden),
        mlp_b2=uniform((width,), hidden),
        conv_w=uniform((1, 2, 1, 1), 2),
        conv_b=uniform((1,), 2),
        reduction=reduction,
    )


def _mlp(v, p):
    h = T.leaky_relu(T.linear(v, p.mlp_w1, p.mlp_b1), LEAKY_SLOPE)
    return T.linear(h, p.mlp_w2, p.mlp_b2)


def channel_attention(x, params):
    """Channel gate in (0,1), shape (b, c, 1, 1)."""
    b, c, h, w = x.shape
    flat = T.reshape(x, (b, c, h * w))
    vmax = T.reduce_max(flat, axis=2)   # (b, c)
    vavg = T.reduce_mean(flat, axis=2)
    logits = T.add(_mlp(vmax, params), _mlp(vavg, params))
    return T.reshape(T.sigmoid(logits), (b, c, 1, 1))


def spatial_attention(x, params):
    """Spatial gate in (0,1), shape (b, 1, h, w)."""
    b, c, h, w = x.shape
    moved = T.transpose(x, (0, 2, 3, 1))               # (b, h, w, c)
    smax = T.reduce_max(moved, axis=3, keepdims=True)
    savg = T.reduce_mean(moved, axis=3, keepdims=True)
    stacked = T.transpose(T.concat([smax, savg], axis=3), (0, 3, 1, 2))  # (b, 2, h, w)
    return T.sigmoid(T.conv2d(stacked, params.conv_w, params.conv_b))


def cbam(x, params):
    """Apply the serial channel/spatial gates; identity when params is None
    (the attention-off ablation)."""
    if params is None:
        return x
    gated = T.mul(x, channel_attention(x, params))
    return T.mul(gated, spatial_attention(gated, params))
