"""Finite-difference verification of every differentiable operation.

Each entry builds a small random problem, wraps it as a scalar function
and compares reverse-mode gradients against central differences. Inputs
are nudged away from kinks (relu corners, pooling ties) so the numeric
derivative is well defined; tolerance for all checks is 1e-4.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import build_attention, cbam, channel_attention, spatial_attention
from .classifier import build_classifier, relation_map, score
from .episodes import Episode, forward_episode
from .hierarchy import hierarchical_rep, multi_instance_rep
from .model import ModelConfig, build_model
from .protogen import PGConfig, generate_prototypes, similarity, similarity_row
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


def _rng(seed):
    return np.random.default_rng(np.random.SeedSequence((0xC0FFEE, seed)))


def _away_from_kinks(x, margin=1e-3):
    """Push values out of the +-margin band around zero."""
    return x + np.sign(x) * margin + (x == 0) * margin


def _spread(rng, shape, lo=-1.0, hi=1.0):
    """Samples with pairwise gaps large relative to the FD step, so
    argmax/top-k selections cannot flip under perturbation."""
    flat = rng.permutation(np.linspace(lo, hi, int(np.prod(shape))))
    return flat.reshape(shape)


def _weighted_sum(out, rng):
    return T.reduce_sum(T.mul(out, Tensor(rng.standard_normal(out.shape))))


def check_conv2d(seed=0):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    probe = rng.standard_normal((2, 4, 6, 6))
    f = lambda xi, wi, bi: T.reduce_sum(T.mul(
        T.conv2d(xi, wi, bi, stride=1, padding=1), Tensor(probe)))
    return grad_check(f, [x, w, b], eps=1e-6)


def check_conv2d_strided(seed=0):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 7, 7)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    probe = rng.standard_normal((1, 3, 3, 3))
    f = lambda xi, wi, bi: T.reduce_sum(T.mul(
        T.conv2d(xi, wi, bi, stride=2, padding=0), Tensor(probe)))
    return grad_check(f, [x, w, b], eps=1e-6)


def check_batchnorm_train(seed=0):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    probe = rng.standard_normal((2, 3, 4, 4))
    f = lambda xi, gi, bi: T.reduce_sum(T.mul(
        T.batchnorm2d(xi, gi, bi, None, "train"), Tensor(probe)))
    return grad_check(f, [x, g, b], eps=1e-6)


def check_batchnorm_eval(seed=0):
    rng = _rng(seed)
    from .tensor import BatchNormState
    state = BatchNormState(3)
    state.running_mean = rng.normal(size=3)
    state.running_var = rng.uniform(0.5, 2.0, 3)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    probe = rng.standard_normal((2, 3, 4, 4))
    f = lambda xi, gi, bi: T.reduce_sum(T.mul(
        T.batchnorm2d(xi, gi, bi, state, "eval"), Tensor(probe)))
    return grad_check(f, [x, g, b], eps=1e-6)


def check_pool_max(seed=0):
    rng = _rng(seed)
    x = Tensor(_spread(rng, (2, 2, 6, 6)), requires_grad=True)
    probe = rng.standard_normal((2, 2, 3, 3))
    f = lambda xi: T.reduce_sum(T.mul(T.pool2d(xi, "max", 3, 3), Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_pool_avg(seed=0):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
    probe = rng.standard_normal((2, 2, 3, 3))
    f = lambda xi: T.reduce_sum(T.mul(T.pool2d(xi, "avg", 3, 3), Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_pool_max_adaptive(seed=0):
    rng = _rng(seed)
    x = Tensor(_spread(rng, (1, 2, 7, 7)), requires_grad=True)
    probe = rng.standard_normal((1, 2, 3, 3))
    f = lambda xi: T.reduce_sum(T.mul(T.pool2d(xi, "max", 3, 3), Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_pool_avg_adaptive(seed=0):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 7, 5)), requires_grad=True)
    probe = rng.standard_normal((1, 2, 3, 2))
    f = lambda xi: T.reduce_sum(T.mul(T.pool2d(xi, "avg", 3, 2), Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_leaky_relu(seed=0):
    rng = _rng(seed)
    x = Tensor(_away_from_kinks(rng.normal(size=(3, 5))), requires_grad=True)
    probe = rng.standard_normal((3, 5))
    f = lambda xi: T.reduce_sum(T.mul(T.leaky_relu(xi, 0.2), Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_sigmoid(seed=0):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    f = lambda xi: T.reduce_sum(T.sigmoid(xi))
    return grad_check(f, [x], eps=1e-6)


def check_softmax(seed=0):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    probe = rng.standard_normal((3, 5))
    f = lambda xi: T.reduce_sum(T.mul(T.softmax(xi, axis=1), Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_arithmetic(seed=0):
    rng = _rng(seed)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, (4,)), requires_grad=True)

    def f(ai, bi):
        s = T.add(ai, bi)            # broadcast add
        p = T.mul(s, ai)
        q = T.div(p, bi)
        return T.reduce_sum(T.sub(q, T.neg(ai)))
    return grad_check(f, [a, b], eps=1e-6)


def check_exp_log_sqrt(seed=0):
    rng = _rng(seed)
    x = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    f = lambda xi: T.reduce_sum(T.log(T.add(T.sqrt(xi), T.exp(T.neg(xi)))))
    return grad_check(f, [x], eps=1e-6)


def check_clamp_clip(seed=0):
    rng = _rng(seed)
    base = rng.normal(size=(4, 4))
    base = base + np.sign(base - 0.3) * 1e-3   # keep away from clip edges
    x = Tensor(base, requires_grad=True)
    probe = rng.standard_normal((4, 4))
    f = lambda xi: T.reduce_sum(T.mul(
        T.clip(T.clamp_min(xi, -0.6), -1.0, 0.3), Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_concat_reshape(seed=0):
    rng = _rng(seed)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    probe = rng.standard_normal((5, 2))

    def f(ai, bi):
        cat = T.concat([ai, bi], axis=1)          # (2, 5)
        moved = T.transpose(cat, (1, 0))          # (5, 2)
        return T.reduce_sum(T.mul(moved, Tensor(probe)))
    return grad_check(f, [a, b], eps=1e-6)


def check_linear(seed=0):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 6)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    probe = rng.standard_normal((4, 3))
    f = lambda xi, wi, bi: T.reduce_sum(T.mul(T.linear(xi, wi, bi), Tensor(probe)))
    return grad_check(f, [x, w, b], eps=1e-6)


def check_einsum(seed=0):
    rng = _rng(seed)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    probe = rng.standard_normal((2, 2, 4, 5))

    def f(ai, bi):
        out = T.einsum("bct,nck->nbtk", ai, bi)
        return T.reduce_sum(T.mul(out, Tensor(probe)))
    return grad_check(f, [a, b], eps=1e-6)


def check_gather_scatter(seed=0):
    rng = _rng(seed)
    x = Tensor(_spread(rng, (3, 6)), requires_grad=True)
    probe = rng.standard_normal((3, 6))

    def f(xi):
        idx = T.topk_indices(xi.data, 2, axis=1)
        sel = T.gather(xi, idx, axis=1)
        spread = T.scatter(T.softmax(sel, axis=1), idx, axis=1, size=6)
        return T.reduce_sum(T.mul(spread, Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_narrow_reduce(seed=0):
    rng = _rng(seed)
    x = Tensor(_spread(rng, (6, 4)), requires_grad=True)
    probe = rng.standard_normal((2,))

    def f(xi):
        part = T.narrow(xi, 1, 3)                       # (2, 4)
        mx = T.reduce_max(part, axis=1)                 # (2,)
        mn = T.reduce_mean(part, axis=1)
        return T.reduce_sum(T.mul(T.add(mx, mn), Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_topk_gather(seed=0):
    rng = _rng(seed)
    x = Tensor(_spread(rng, (9,)), requires_grad=True)
    probe = rng.standard_normal(4)

    def f(xi):
        _, picked = T.topk_gather(xi, 4)
        return T.reduce_sum(T.mul(picked, Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_similarity_cosine(seed=0):
    rng = _rng(seed)
    a = Tensor(rng.normal(size=5), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    f = lambda ai, bi: similarity("cosine", ai, bi)
    return grad_check(f, [a, b], eps=1e-6)


def check_similarity_gaussian(seed=0):
    rng = _rng(seed)
    a = Tensor(rng.normal(size=5) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=5) * 0.5, requires_grad=True)
    f = lambda ai, bi: similarity("gaussian", ai, bi)
    return grad_check(f, [a, b], eps=1e-6)


def check_similarity_row(seed=0):
    rng = _rng(seed)
    u = Tensor(rng.normal(size=4), requires_grad=True)
    sup = Tensor(rng.normal(size=(4, 7)), requires_grad=True)
    probe = rng.standard_normal(7)
    f = lambda ui, si: T.reduce_sum(T.mul(
        similarity_row(ui, si, "cosine"), Tensor(probe)))
    return grad_check(f, [u, sup], eps=1e-6)


def check_protogen(seed=0):
    rng = _rng(seed)
    q = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    sup = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    probe = rng.standard_normal((2, 3, 4))
    cfg = PGConfig(xi=3, similarity="cosine")

    def f(qi, si):
        protos, _ = generate_prototypes(qi, si, cfg)
        return T.reduce_sum(T.mul(protos, Tensor(probe)))
    return grad_check(f, [q, sup], eps=1e-6)


def check_attention(seed=0):
    rng = _rng(seed)
    params = build_attention(4, 4, rng_seed=seed)
    x = Tensor(rng.normal(size=(1, 4, 3, 3)), requires_grad=True)
    probe = rng.standard_normal((1, 4, 3, 3))
    inputs = [x] + [p for _, p in params.parameters()]

    def f(*_):
        return T.reduce_sum(T.mul(cbam(x, params), Tensor(probe)))
    return grad_check(f, inputs, eps=1e-6)


def check_channel_spatial_gates(seed=0):
    rng = _rng(seed)
    params = build_attention(4, 4, rng_seed=seed + 1)
    x = Tensor(rng.normal(size=(1, 4, 3, 3)), requires_grad=True)
    pc = rng.standard_normal((1, 4, 1, 1))
    ps = rng.standard_normal((1, 1, 3, 3))

    def f(xi):
        wc = channel_attention(xi, params)
        ws = spatial_attention(xi, params)
        return T.add(T.reduce_sum(T.mul(wc, Tensor(pc))),
                     T.reduce_sum(T.mul(ws, Tensor(ps))))
    return grad_check(f, [x], eps=1e-6)


def check_hierarchy(seed=0):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    probe = rng.standard_normal((2, 3, 36 + 9 + 1))

    def f(xi):
        rep = hierarchical_rep(xi, (3, 1))
        return T.reduce_sum(T.mul(rep.fgcs, Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_multi_instance(seed=0):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    probe = rng.standard_normal((3, 2 * (16 + 4)))

    def f(xi):
        rep = multi_instance_rep(xi, (2,))
        return T.reduce_sum(T.mul(rep, Tensor(probe)))
    return grad_check(f, [x], eps=1e-6)


def check_relation_map(seed=0):
    rng = _rng(seed)
    p = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    q = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    probe = rng.standard_normal(5)

    def f(pi, qi):
        rel = relation_map(pi, qi, "cosine")
        return T.reduce_sum(T.mul(rel.r, Tensor(probe)))
    return grad_check(f, [p, q], eps=1e-6)


def check_classifier(seed=0):
    rng = _rng(seed)
    params = build_classifier(7, rng_seed=seed)
    r = Tensor(rng.uniform(-1, 1, 7), requires_grad=True)
    inputs = [r] + [p for _, p in params.parameters()]

    def f(*_):
        return score(r, params)
    return grad_check(f, inputs, eps=1e-6)


def _stripe_image(freq, orient, phase, noise, rng):
    yy, xx = np.mgrid[0:8, 0:8]
    base = np.sin(2 * np.pi * freq * (xx if orient == 0 else yy) / 8 + phase)
    img = 0.5 + 0.35 * base + noise * rng.normal(size=(8, 8))
    return img[None].clip(0.0, 1.0)


def micro_episode_setup(seed=1):
    """A full 2-way 1-shot task on 8x8 inputs at width 4.

    The two classes are distinct stripe patterns: structured images keep
    the top-k similarity margins far above the finite-difference step, so
    selections cannot flip inside the +-eps neighbourhood.
    """
    rng = np.random.default_rng(np.random.SeedSequence((0xFEED, seed)))
    cfg = ModelConfig(image_size=8, channels=1, width=4, reduction=4,
                      scales=(1,), classifier_dims=(4, 3, 2))
    model = build_model(cfg, seed=seed)
    support = np.stack([_stripe_image(1, 0, 0.3, 0.05, rng),
                        _stripe_image(3, 1, 1.1, 0.05, rng)])
    query = np.stack([_stripe_image(1, 0, 0.8, 0.05, rng),
                      _stripe_image(1, 0, 1.9, 0.05, rng),
                      _stripe_image(3, 1, 0.2, 0.05, rng),
                      _stripe_image(3, 1, 2.0, 0.05, rng)])
    episode = Episode(class_ids=np.array([0, 1]), support=support, query=query,
                      labels=np.array([0, 0, 1, 1]), n_way=2, k_shot=1, m_query=2)
    return model, episode


def check_micro_episode(seed=1):
    # fixed benchmark episode: FD through discrete selections needs the
    # margin-verified setup, so the suite seed is deliberately ignored
    model, episode = micro_episode_setup(1)
    pg = PGConfig(xi=2, similarity="cosine")
    inputs = [p for _, p in model.parameters()]

    def f(*_):
        loss, _ = forward_episode(episode, model, pg, use_protogen=True, mode="train")
        return loss
    return grad_check(f, inputs, eps=1e-4)


CHECKS = {
    "conv2d": check_conv2d,
    "conv2d_strided": check_conv2d_strided,
    "batchnorm_train": check_batchnorm_train,
    "batchnorm_eval": check_batchnorm_eval,
    "pool_max": check_pool_max,
    "pool_avg": check_pool_avg,
    "pool_max_adaptive": check_pool_max_adaptive,
    "pool_avg_adaptive": check_pool_avg_adaptive,
    "leaky_relu": check_leaky_relu,
    "sigmoid": check_sigmoid,
    "softmax": check_softmax,
    "arithmetic": check_arithmetic,
    "exp_log_sqrt": check_exp_log_sqrt,
    "clamp_clip": check_clamp_clip,
    "concat_reshape": check_concat_reshape,
    "linear": check_linear,
    "einsum": check_einsum,
    "gather_scatter": check_gather_scatter,
    "narrow_reduce": check_narrow_reduce,
    "topk_gather": check_topk_gather,
    "similarity_cosine": check_similarity_cosine,
    "similarity_gaussian": check_similarity_gaussian,
    "similarity_row": check_similarity_row,
    "protogen": check_protogen,
    "attention": check_attention,
    "attention_gates": check_channel_spatial_gates,
    "hierarchy": check_hierarchy,
    "multi_instance": check_multi_instance,
    "relation_map": check_relation_map,
    "classifier": check_classifier,
    "micro_episode": check_micro_episode,
}


def run_checks(names=None, seed=0):
    """Run the suite (or a subset); returns [(name, max_rel_err)]."""
    selected = CHECKS if names is None else {n: CHECKS[n] for n in names}
    return [(name, fn(seed)) for name, fn in selected.items()]
