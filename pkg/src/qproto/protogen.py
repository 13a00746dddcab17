"""Query-specific prototype generation.

For every cell of a query's hierarchical representation, find the most
similar cells in the support class's pooled cell matrix, softmax-weight
the best xi of them and aggregate. The selection indices are constants of
the backward pass; gradient flows through the similarities (into the
weights) and through the gathered support values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, RangeError
from .hierarchy import HierarchicalRep
from .tensor import Tensor

ZERO_NORM_EPS = 1e-12     # columns with smaller norm count as zero vectors
GAUSS_CLAMP = 500.0       # exponent clamp keeps exp() finite, preserves ordering

SIMILARITY_KINDS = ("cosine", "gaussian")


@dataclass
class PGConfig:
    """Prototype generator knobs: how many neighbours and which metric."""
    xi: int = 5
    similarity: str = "cosine"
    clamp_xi: bool = True

    def __post_init__(self):
        if self.xi < 1:
            raise ConfigError(f"generation coefficient xi must be >= 1, got {self.xi}")
        if self.similarity not in SIMILARITY_KINDS:
            raise ConfigError(
                f"similarity must be one of {SIMILARITY_KINDS}, got {self.similarity!r}")


@dataclass
class Provenance:
    """Selected support column indices and their weights, per query cell."""
    indices: np.ndarray   # (..., T, xi) int
    weights: np.ndarray   # (..., T, xi) float, rows sum to 1


@dataclass
class QuerySpecificPrototype:
    fgcs: Tensor          # (c, T), aligned index-by-index with the query
    provenance: Provenance
    similarity: str


def _unit_columns(x, axis):
    """Normalize along ``axis``; columns with norm < 1e-12 become zero
    (this is what makes the zero-vector cosine guard hold)."""
    sumsq = T.reduce_sum(T.mul(x, x), axis=axis, keepdims=True)
    norm = T.sqrt(T.clamp_min(sumsq, ZERO_NORM_EPS ** 2))
    unit = T.div(x, norm)
    mask = (sumsq.data >= ZERO_NORM_EPS ** 2).astype(np.float64)
    return T.mul(unit, Tensor(mask))


def similarity_matrix(queries, support, kind):
    """All query-cell vs support-cell similarities.

    queries: (b, c, T); support: (c, KT); result: (b, T, KT).
    """
    if kind == "cosine":
        qn = _unit_columns(queries, axis=1)
        vn = _unit_columns(support, axis=0)
        return T.einsum("bct,ck->btk", qn, vn)
    if kind == "gaussian":
        dots = T.einsum("bct,ck->btk", queries, support)
        return T.exp(T.clip(dots, -GAUSS_CLAMP, GAUSS_CLAMP))
    raise ConfigError(f"unknown similarity kind {kind!r}")


def similarity(kind, a, b):
    """Scalar similarity of two c-vectors (cosine in [-1,1] with a
    zero-vector guard, or exp of the clamped dot product)."""
    row = similarity_matrix(T.reshape(a, (1, a.shape[0], 1)),
                            T.reshape(b, (b.shape[0], 1)), kind)
    return T.reshape(row, ())


def similarity_row(u, support, kind):
    """Similarities of one query cell against every support column: (KT,)."""
    mat = similarity_matrix(T.reshape(u, (1, u.shape[0], 1)), support, kind)
    return T.reshape(mat, (mat.shape[2],))


def _effective_xi(xi, kt, clamp_xi):
    if xi > kt:
        if not clamp_xi:
            raise RangeError(f"xi={xi} exceeds support pool size {kt} and clamp_xi is off")
        return kt
    return xi


def aggregate_topk(sims, support, config, contraction):
    """Select the top-xi support columns per query cell and aggregate.

    ``sims`` has shape (..., T, KT); selection runs over the last axis.
    Returns (prototypes via ``contraction``, Provenance). Indices are
    constants; gradient reaches the similarities through the softmax
    weights and the support values through the weighted sum.
    """
    kt = support.shape[-1]
    xi = _effective_xi(config.xi, kt, config.clamp_xi)
    last = sims.ndim - 1
    idx = T.topk_indices(sims.data, xi, axis=last)
    selected = T.gather(sims, idx, axis=last)
    rho = T.softmax(selected, axis=last)
    weights = T.scatter(rho, idx, axis=last, size=kt)   # sparse rows summing to 1
    protos = T.einsum(contraction, weights, support)
    return protos, Provenance(indices=idx, weights=rho.data.copy())


def generate_prototypes(queries, support, config):
    """Batched generator: queries (b, c, T), support (c, KT).

    Returns (prototypes (b, c, T), Provenance with (b, T, xi') arrays).
    Every prototype column is a convex combination of support columns.
    """
    sims = similarity_matrix(queries, support, config.similarity)   # (b, T, KT)
    return aggregate_topk(sims, support, config, "btk,ck->bct")


def generate_prototypes_multi(queries, support_all, config, queries_unit=None):
    """All classes at once: queries (b, c, T), support_all (n, c, KT).

    Returns (prototypes (n, b, c, T), Provenance with (n-leading arrays)).
    ``queries_unit`` lets the caller reuse pre-normalized query columns
    under cosine similarity.
    """
    if config.similarity == "cosine":
        qn = queries_unit if queries_unit is not None else _unit_columns(queries, axis=1)
        vn = _unit_columns(support_all, axis=1)
        sims = T.einsum("bct,nck->nbtk", qn, vn)
    else:
        dots = T.einsum("bct,nck->nbtk", queries, support_all)
        sims = T.exp(T.clip(dots, -GAUSS_CLAMP, GAUSS_CLAMP))
    return aggregate_topk(sims, support_all, config, "nbtk,nck->nbct")


def generate_fgc(u, support, config):
    """Generate one prototype cell for query cell ``u`` (c,).

    Returns (cell (c,), Provenance with (xi',) arrays).
    """
    protos, prov = generate_prototypes(
        T.reshape(u, (1, u.shape[0], 1)), support, config)
    cell = T.reshape(protos, (protos.shape[1],))
    return cell, Provenance(indices=prov.indices[0, 0], weights=prov.weights[0, 0])


def generate_prototype(query, support, config):
    """Generate the full prototype for one query representation.

    ``query`` is a HierarchicalRep or a (c, T) tensor; ``support`` the
    (c, KT) pooled class matrix.
    """
    fgcs = query.fgcs if isinstance(query, HierarchicalRep) else query
    c, t_total = fgcs.shape
    protos, prov = generate_prototypes(T.reshape(fgcs, (1, c, t_total)), support, config)
    return QuerySpecificPrototype(
        fgcs=T.reshape(protos, (c, t_total)),
        provenance=Provenance(indices=prov.indices[0], weights=prov.weights[0]),
        similarity=config.similarity,
    )
