"""Relation map and the small MLP that scores it, plus episode loss.

A relation map is the T-vector of per-index similarities between a query
representation and its generated prototype. One shared four-layer MLP
turns a relation map into an unbounded class score; per query the N class
scores go through softmax + cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .hierarchy import HierarchicalRep
from .protogen import GAUSS_CLAMP, QuerySpecificPrototype, _unit_columns
from .tensor import Tensor

LEAKY_SLOPE = 0.2


@dataclass
class RelationMap:
    r: Tensor             # (T,) or (b, T)
    similarity: str


@dataclass
class ClassifierParams:
    """Four-layer MLP, leaky-ReLU hidden activations, linear final layer."""
    weights: list         # [(w, b)] * 4
    input_dim: int
    hidden_dims: tuple

    def parameters(self):
        named = []
        for i, (w, b) in enumerate(self.weights, start=1):
            named += [(f"clf.layer{i}.weight", w), (f"clf.layer{i}.bias", b)]
        return named


def default_hidden_dims(t_total):
    """48/16/8 at T=629, shrinking roughly with T but floored so tiny
    configurations still have some capacity."""
    h1 = max(8, round(t_total / 13))
    h2 = max(4, h1 // 3)
    h3 = max(2, h1 // 6)
    return (h1, h2, h3)


def build_classifier(t_total, hidden_dims=None, rng_seed=0):
    if hidden_dims is None:
        hidden_dims = default_hidden_dims(t_total)
    if len(hidden_dims) != 3:
        raise ConfigError(f"classifier needs 3 hidden dims, got {hidden_dims}")
    rng = np.random.default_rng(rng_seed)
    dims = [t_total, *hidden_dims, 1]
    weights = []
    for din, dout in zip(dims[:-1], dims[1:]):
        limit = 1.0 / np.sqrt(din)
        weights.append((
            Tensor(rng.uniform(-limit, limit, (dout, din)), requires_grad=True),
            Tensor(rng.uniform(-limit, limit, dout), requires_grad=True),
        ))
    return ClassifierParams(weights=weights, input_dim=t_total, hidden_dims=tuple(hidden_dims))


def _columns(x):
    if isinstance(x, QuerySpecificPrototype):
        return x.fgcs
    if isinstance(x, HierarchicalRep):
        return x.fgcs
    return x


def relation_maps(prototypes, queries, kind):
    """Batched relation maps: (b, c, T) x (b, c, T) -> (b, T)."""
    p, q = _columns(prototypes), _columns(queries)
    if p.shape != q.shape:
        raise DimensionError(f"relation map: prototype {p.shape} vs query {q.shape}")
    if kind == "cosine":
        pn = _unit_columns(p, axis=1)
        qn = _unit_columns(q, axis=1)
        return T.reduce_sum(T.mul(pn, qn), axis=1)
    if kind == "gaussian":
        dots = T.reduce_sum(T.mul(p, q), axis=1)
        return T.exp(T.clip(dots, -GAUSS_CLAMP, GAUSS_CLAMP))
    raise ConfigError(f"unknown similarity kind {kind!r}")


def relation_map(prototype, query, kind):
    """Relation map of a single (c, T) prototype/query pair."""
    p, q = _columns(prototype), _columns(query)
    r = relation_maps(T.reshape(p, (1,) + p.shape), T.reshape(q, (1,) + q.shape), kind)
    return RelationMap(r=T.reshape(r, (r.shape[1],)), similarity=kind)


def scores(relmaps, params):
    """Score a batch of relation maps: (b, T) -> (b,)."""
    h = relmaps.r if isinstance(relmaps, RelationMap) else relmaps
    if h.shape[-1] != params.input_dim:
        raise DimensionError(
            f"classifier built for T={params.input_dim}, relation map has T={h.shape[-1]}")
    for w, b in params.weights[:-1]:
        h = T.leaky_relu(T.linear(h, w, b), LEAKY_SLOPE)
    w, b = params.weights[-1]
    out = T.linear(h, w, b)
    return T.reshape(out, out.shape[:-1])


def score(relmap, params):
    """Scalar similarity score of one relation map."""
    r = relmap.r if isinstance(relmap, RelationMap) else relmap
    return T.reshape(scores(T.reshape(r, (1, r.shape[0])), params), ())


@dataclass
class EpisodeScores:
    logits: np.ndarray        # (Q, N)
    probs: np.ndarray         # (Q, N), rows sum to 1
    labels: np.ndarray        # (Q,)
    loss: float
    accuracy: float


def episode_loss(logits, labels):
    """Mean cross-entropy over queries plus episode accuracy.

    ``logits`` is a (Q, N) tensor of class scores; ``labels`` integer class
    ids in [0, N). Argmax ties resolve to the lowest class index.
    """
    labels = np.asarray(labels, dtype=np.int64)
    q, n = logits.shape
    if q == 0:
        raise ContractError("episode_loss: empty query set")
    if labels.shape != (q,):
        raise DimensionError(f"episode_loss: {q} queries but {labels.shape} labels")
    if labels.min() < 0 or labels.max() >= n:
        raise ContractError(f"episode_loss: labels outside [0, {n})")

    # log-softmax with a detached shift: subtracting the row max changes
    # neither the loss nor its gradient, only the floating-point range
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = T.sub(logits, shift)
    lse = T.log(T.reduce_sum(T.exp(z), axis=1, keepdims=True))
    logp = T.sub(z, lse)
    onehot = np.zeros((q, n))
    onehot[np.arange(q), labels] = 1.0
    loss = T.neg(T.reduce_mean(T.reduce_sum(T.mul(logp, Tensor(onehot)), axis=1)))

    probs = np.exp(logp.data)
    acc = float(np.mean(logits.data.argmax(axis=1) == labels))
    report = EpisodeScores(logits=logits.data.copy(), probs=probs, labels=labels,
                           loss=float(loss.data), accuracy=acc)
    return loss, report
