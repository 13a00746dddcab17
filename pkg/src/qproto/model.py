"""Model assembly: the three learnable parameter groups and their config.

The embedding, attention and classifier builders each consume a child seed
derived from one model seed, so a model is a pure function of
(ModelConfig, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import build_attention
from .classifier import build_classifier, default_hidden_dims
from .embedding import build_embedding
from .errors import ConfigError
from .hierarchy import fgc_count


def default_reduction(width):
    """16 at the reference width, 4 at toy widths."""
    return 16 if width >= 64 else 4


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    width: int = 32
    reduction: int = 0              # 0 = derive from width
    scales: tuple = (4, 3, 2, 1)
    classifier_dims: tuple = ()     # () = derive from T
    attention: bool = True          # False drops the attention group entirely
    hierarchy: bool = True          # False keeps only the base grid

    def __post_init__(self):
        if self.image_size % 4 != 0:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 4")
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")
        if self.reduction == 0:
            self.reduction = default_reduction(self.width)
        if self.attention and self.width % self.reduction != 0:
            raise ConfigError(
                f"width {self.width} not divisible by attention reduction {self.reduction}")
        self.scales = tuple(int(s) for s in self.scales)
        base = self.base_grid
        if self.hierarchy:
            fgc_count(base, self.scales)   # validates the scale list
        self.classifier_dims = tuple(int(d) for d in self.classifier_dims)

    @property
    def base_grid(self):
        return self.image_size // 4

    @property
    def active_scales(self):
        return self.scales if self.hierarchy else ()

    @property
    def t_total(self):
        return fgc_count(self.base_grid, self.active_scales)

    def resolved_classifier_dims(self):
        return self.classifier_dims if self.classifier_dims else default_hidden_dims(self.t_total)


@dataclass
class ModelParams:
    """Embedding + attention + classifier groups plus their config."""
    embedding: object
    attention: object     # None when the attention ablation is off
    classifier: object
    config: ModelConfig

    def groups(self):
        return [g for g in (self.embedding, self.attention, self.classifier) if g is not None]

    def parameters(self):
        """Ordered (name, tensor) pairs of every learnable scalar array."""
        named = []
        for g in self.groups():
            named += g.parameters()
        return named

    def trainable(self):
        return [p for _, p in self.parameters()]

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    def bn_states(self):
        return [(f"embed.block{i}.bn", blk.bn)
                for i, blk in enumerate(self.embedding.blocks, start=1)]


def build_model(cfg, seed):
    """Deterministically initialize all parameter groups from one seed
    (an int or a SeedSequence)."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_embed, s_attn, s_clf = ss.spawn(3)
    embedding = build_embedding(cfg.channels, cfg.width, s_embed)
    attention = build_attention(cfg.width, cfg.reduction, s_attn) if cfg.attention else None
    classifier = build_classifier(cfg.t_total, cfg.classifier_dims or None, s_clf)
    return ModelParams(embedding=embedding, attention=attention,
                       classifier=classifier, config=cfg)
