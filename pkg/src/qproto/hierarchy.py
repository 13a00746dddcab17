"""Multi-scale cell representation of a feature map.

The base grid is kept as-is and the map is additionally average-pooled to
a list of coarser square grids; all cells are flattened row-major and
stacked columnwise into one c x T matrix, T = h*w + sum(s^2). Coarser
cells summarize larger regions, which lets later matching compare regions
of different apparent size.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


def _validate_scales(base, scales):
    prev = None
    for s in scales:
        if s < 1:
            raise ConfigError(f"scale {s} must be >= 1")
        if s >= base:
            raise ConfigError(f"scale {s} must be smaller than base grid {base}")
        if prev is not None and s >= prev:
            raise ConfigError(f"scales must be strictly descending, got {list(scales)}")
        prev = s


def fgc_count(base, scales):
    """Number of cells: base^2 plus s^2 for every added scale."""
    _validate_scales(base, scales)
    return base * base + sum(s * s for s in scales)


def scale_layout(base, scales):
    """(grid_size, column_offset) pairs, base grid first."""
    _validate_scales(base, scales)
    layout = [(base, 0)]
    off = base * base
    for s in scales:
        layout.append((s, off))
        off += s * s
    return layout


@dataclass
class HierarchicalRep:
    """c x T cell matrix of one instance plus its scale bookkeeping."""
    fgcs: Tensor          # (c, T) or (b, c, T)
    sizes: tuple          # base grid first, then the added scales
    offsets: tuple        # column offset of each grid block

    @property
    def t_total(self):
        return self.fgcs.shape[-1]


def hierarchical_rep(x, scales):
    """Build the c x T representation of a feature map batch.

    ``x`` is (b, c, h, w) or (c, h, w); output fgcs are (b, c, T) or (c, T)
    with block 0 the flattened base grid and one block per scale after it.
    """
    single = x.ndim == 3
    xb = T.reshape(x, (1,) + x.shape) if single else x
    b, c, h, w = xb.shape
    base = min(h, w)
    _validate_scales(base, scales)
    blocks = [T.reshape(xb, (b, c, h * w))]
    sizes = [base]
    offsets = [0]
    off = h * w
    for s in scales:
        pooled = T.pool2d(xb, "avg", s, s)
        blocks.append(T.reshape(pooled, (b, c, s * s)))
        sizes.append(s)
        offsets.append(off)
        off += s * s
    fgcs = T.concat(blocks, axis=2) if len(blocks) > 1 else blocks[0]
    if single:
        fgcs = T.reshape(fgcs, fgcs.shape[1:])
    return HierarchicalRep(fgcs=fgcs, sizes=tuple(sizes), offsets=tuple(offsets))


def multi_instance_rep(instances, scales):
    """Concatenate the per-instance representations of a support class.

    ``instances`` is a (K, c, h, w) tensor or a list of (c, h, w) tensors;
    the result is a (c, K*T) matrix with instance k occupying columns
    [k*T, (k+1)*T).
    """
    if isinstance(instances, (list, tuple)):
        shapes = {inst.shape for inst in instances}
        if len(shapes) != 1:
            raise DimensionError(f"multi_instance_rep: heterogeneous shapes {sorted(shapes)}")
        stacked = T.concat([T.reshape(i, (1,) + i.shape) for i in instances], axis=0)
    else:
        stacked = instances
    k, c = stacked.shape[0], stacked.shape[1]
    rep = hierarchical_rep(stacked, scales)           # (K, c, T)
    t_total = rep.fgcs.shape[2]
    cols = T.transpose(rep.fgcs, (1, 0, 2))           # (c, K, T)
    return T.reshape(cols, (c, k * t_total))
