"""Four-block convolutional feature extractor.

Maps a (b, cin, s, s) image batch to a (b, c, s/4, s/4) feature map whose
spatial cells are c-dimensional local descriptors (fine-grained cells).
Each block is conv3x3(pad 1) -> batchnorm -> leaky ReLU; 2x2 max pools sit
after the middle two blocks, and the attention gate after the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import cbam
from .errors import ConfigError
from .tensor import BatchNormState, Tensor

LEAKY_SLOPE = 0.2


@dataclass
class ConvBlock:
    weight: Tensor  # (cout, cin, 3, 3)
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState = field(default_factory=BatchNormState)


@dataclass
class EmbeddingParams:
    """The embedding parameter group: four conv blocks of shared width."""
    blocks: list
    image_channels: int
    width: int

    def parameters(self):
        named = []
        for i, blk in enumerate(self.blocks, start=1):
            named += [
                (f"embed.block{i}.weight", blk.weight),
                (f"embed.block{i}.bias", blk.bias),
                (f"embed.block{i}.gamma", blk.gamma),
                (f"embed.block{i}.beta", blk.beta),
            ]
        return named


def build_embedding(image_channels, width, rng_seed=0):
    """Fan-in-scaled uniform init; batchnorm starts at identity with
    running stats (0, 1). Bit-identical for equal seeds."""
    if width < 1:
        raise ConfigError(f"embedding width must be >= 1, got {width}")
    rng = np.random.default_rng(rng_seed)
    blocks = []
    cin = image_channels
    for _ in range(4):
        fan_in = cin * 9
        limit = 1.0 / np.sqrt(fan_in)
        blocks.append(ConvBlock(
            weight=Tensor(rng.uniform(-limit, limit, (width, cin, 3, 3)), requires_grad=True),
            bias=Tensor(rng.uniform(-limit, limit, width), requires_grad=True),
            gamma=Tensor(np.ones(width), requires_grad=True),
            beta=Tensor(np.zeros(width), requires_grad=True),
            bn=BatchNormState(width),
        ))
        cin = width
    return EmbeddingParams(blocks=blocks, image_channels=image_channels, width=width)


def _block(x, blk, mode):
    h = T.conv2d(x, blk.weight, blk.bias, stride=1, padding=1)
    h = T.batchnorm2d(h, blk.gamma, blk.beta, blk.bn, mode)
    return T.leaky_relu(h, LEAKY_SLOPE)


def embed(images, params, attn_params=None, mode="train"):
    """Run the backbone: block1 -> attention -> block2 -> pool ->
    block3 -> pool -> block4. Output spatial size is input/4."""
    b, cin, s1, s2 = images.shape
    if cin != params.image_channels:
        raise ConfigError(
            f"embed: images have {cin} channels, embedding built for {params.image_channels}")
    if s1 % 4 != 0 or s2 % 4 != 0:
        raise ConfigError(f"embed: spatial size {s1}x{s2} must be divisible by 4")
    h = _block(images, params.blocks[0], mode)
    h = cbam(h, attn_params)
    h = _block(h, params.blocks[1], mode)
    h = T.pool2d(h, "max", h.shape[2] // 2, h.shape[3] // 2)
    h = _block(h, params.blocks[2], mode)
    h = T.pool2d(h, "max", h.shape[2] // 2, h.shape[3] // 2)
    return _block(h, params.blocks[3], mode)


def count_params(*groups):
    """Total learnable scalars across parameter groups (running stats are
    not learnable and are excluded)."""
    total = 0
    for group in groups:
        if group is None:
            continue
        for _, p in group.parameters():
            total += p.data.size
    return total
