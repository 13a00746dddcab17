"""Episode sampling, the training loop, and evaluation.

Training consumes one sampled episode per optimizer step. All images of
an episode go through the embedding as one batch; prototypes, relation
maps and scores for all (query, class) pairs are computed with batched
tensor ops, which is numerically identical to the per-query loop but far
cheaper on this core.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, restore_adam, restore_model, save_checkpoint
from .classifier import episode_loss, scores
from .embedding import embed
from .errors import ConfigError, DatasetError, NumericsError
from .hierarchy import hierarchical_rep
from .model import build_model
from .protogen import PGConfig, _unit_columns, generate_prototypes_multi
from .tensor import AdamState, Tensor, adam_step, backward, no_grad

LOG_HEADER = "episode,loss,acc,lr"


@dataclass
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    m_query: int = 15

    def __post_init__(self):
        if self.n_way < 2:
            raise ConfigError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_shot < 1 or self.m_query < 1:
            raise ConfigError("k_shot and m_query must be >= 1")


@dataclass
class Episode:
    class_ids: np.ndarray     # (N,) dataset class ids in draw order
    support: np.ndarray       # (N*K, c, s, s) class-major
    query: np.ndarray         # (N*M, c, s, s) class-major
    labels: np.ndarray        # (N*M,) remapped to [0, N)
    n_way: int
    k_shot: int
    m_query: int


def sample_episode(split, cfg, rng):
    """Draw N distinct classes, then K+M distinct samples per class.

    Labels are remapped by draw order; support and query are disjoint by
    construction (distinct sample indices) and this is asserted.
    """
    if split.n_classes < cfg.n_way:
        raise DatasetError(
            f"split {split.tag!r} has {split.n_classes} classes, "
            f"need {cfg.n_way} for an episode")
    chosen = rng.choice(np.asarray(sorted(split.class_ids)), size=cfg.n_way, replace=False)
    need = cfg.k_shot + cfg.m_query
    support, query = [], []
    for cid in chosen:
        stack = split.samples[int(cid)]
        if stack.shape[0] < need:
            name = split.class_names.get(int(cid), str(cid))
            raise DatasetError(
                f"class {name} has {stack.shape[0]} samples, episode needs {need}")
        idx = rng.choice(stack.shape[0], size=need, replace=False)
        assert len(set(idx.tolist())) == need   # support/query disjointness
        support.append(stack[idx[:cfg.k_shot]])
        query.append(stack[idx[cfg.k_shot:]])
    labels = np.repeat(np.arange(cfg.n_way), cfg.m_query)
    return Episode(class_ids=chosen, support=np.concatenate(support),
                   query=np.concatenate(query), labels=labels,
                   n_way=cfg.n_way, k_shot=cfg.k_shot, m_query=cfg.m_query)


def forward_episode(episode, model, pg, use_protogen=True, mode="train"):
    """Score every query against every class; returns (loss, EpisodeScores).

    With the prototype generator ablated, each class is represented by its
    columnwise mean cell matrix instead of a query-specific prototype.
    """
    n, k = episode.n_way, episode.k_shot
    nk = n * k
    images = Tensor(np.concatenate([episode.support, episode.query]))
    fmaps = embed(images, model.embedding, model.attention, mode=mode)
    rep = hierarchical_rep(fmaps, model.config.active_scales).fgcs   # (B, c, T)
    b_total, c, t = rep.shape
    q_count = b_total - nk

    sup = T.narrow(rep, 0, nk)
    qry = T.narrow(rep, nk, b_total)
    # class-major support rows -> one (c, K*T) cell pool per class
    sup_cls = T.reshape(T.transpose(T.reshape(sup, (n, k, c, t)), (0, 2, 1, 3)),
                        (n, c, k * t))

    qn = _unit_columns(qry, axis=1) if pg.similarity == "cosine" else None
    if use_protogen:
        protos, _ = generate_prototypes_multi(qry, sup_cls, pg, queries_unit=qn)
        proto_c_axis = 2
    else:
        protos = T.reshape(T.reduce_mean(T.reshape(sup_cls, (n, c, k, t)), axis=2),
                           (n, 1, c, t))
        proto_c_axis = 2

    if pg.similarity == "cosine":
        pn = _unit_columns(protos, axis=proto_c_axis)
        rel = T.reduce_sum(T.mul(pn, T.reshape(qn, (1, q_count, c, t))), axis=2)
    else:
        dots = T.reduce_sum(T.mul(protos, T.reshape(qry, (1, q_count, c, t))), axis=2)
        rel = T.exp(T.clip(dots, -500.0, 500.0))

    flat = T.reshape(rel, (n * q_count, t))
    logits = T.transpose(T.reshape(scores(flat, model.classifier), (n, q_count)), (1, 0))
    return episode_loss(logits, episode.labels)


@dataclass
class TrainConfig:
    episodes: int = 5000
    lr: float = 1e-3
    halve_every: int = 2000       # 0 disables the schedule
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 1000  # 0 = only the final checkpoint
    protogen: bool = True
    pg: PGConfig = field(default_factory=PGConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)

    def __post_init__(self):
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if self.halve_every < 0 or (self.episodes and self.halve_every > self.episodes):
            raise ConfigError(
                f"halve_every {self.halve_every} must be disabled (0) or "
                f"<= episodes {self.episodes}")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("log_every >= 1 and checkpoint_every >= 0 required")


def lr_at(episode_index, lr0, halve_every):
    """Step schedule: halve after every ``halve_every`` episodes (0-based)."""
    if not halve_every:
        return lr0
    return lr0 * 0.5 ** (episode_index // halve_every)


@dataclass
class TrainResult:
    model: object
    adam: AdamState
    log_rows: list                # (episode, loss, acc, lr)
    final_checkpoint: str = ""
    sampler_state: dict = None


def _rng_state(rng):
    return rng.bit_generator.state


def train(train_cfg, model_cfg, split, out_dir=None, resume=None,
          config_text="", config_digest=""):
    """Algorithm: sample episode -> forward -> loss -> backward -> Adam,
    with a halving lr schedule, CSV logging and periodic checkpoints.

    Raises NumericsError on NaN loss/gradients, keeping the last good
    checkpoint on disk.
    """
    ss = np.random.SeedSequence(train_cfg.seed)
    model_ss, sampler_ss = ss.spawn(2)
    model = build_model(model_cfg, model_ss)
    adam = AdamState(model.trainable(), lr=train_cfg.lr, beta1=train_cfg.beta1,
                     beta2=train_cfg.beta2, eps=train_cfg.adam_eps)
    sampler = np.random.default_rng(sampler_ss)
    start = 0

    if resume is not None:
        header, arrays = load_checkpoint(resume, expected_digest=config_digest or None)
        restore_model(model, header, arrays)
        restored = restore_adam(model, header, arrays)
        if restored is not None:
            adam = restored
        if header["rng_state"] is not None:
            sampler.bit_generator.state = header["rng_state"]
        start = header["episode"]

    log_path = None
    log_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "log.csv")
        fresh = start == 0 or not os.path.exists(log_path)
        log_file = open(log_path, "w" if fresh else "a")
        if fresh:
            log_file.write(LOG_HEADER + "\n")

    def write_checkpoint(name, episode_no):
        if not out_dir:
            return ""
        path = os.path.join(out_dir, name)
        save_checkpoint(path, model, config_text, config_digest, episode=episode_no,
                        adam=adam, rng_state=_rng_state(sampler))
        return path

    last_good = ""
    log_rows = []
    try:
        for e in range(start, train_cfg.episodes):
            adam.lr = lr_at(e, train_cfg.lr, train_cfg.halve_every)
            episode = sample_episode(split, train_cfg.episode, sampler)
            loss, report = forward_episode(episode, model, train_cfg.pg,
                                           use_protogen=train_cfg.protogen, mode="train")
            if not np.isfinite(report.loss):
                raise NumericsError(
                    f"episode {e + 1}: loss is not finite; "
                    f"last good checkpoint: {last_good or '(none written)'}")
            model.zero_grad()
            backward(loss)
            if not adam_step(model.trainable(), adam):
                raise NumericsError(
                    f"episode {e + 1}: non-finite gradients, update refused; "
                    f"last good checkpoint: {last_good or '(none written)'}")
            if (e + 1) % train_cfg.log_every == 0 or e == start:
                row = (e + 1, report.loss, report.accuracy, adam.lr)
                log_rows.append(row)
                if log_file:
                    log_file.write(f"{row[0]},{row[1]:.10g},{row[2]:.10g},{row[3]:.10g}\n")
                    log_file.flush()
            if train_cfg.checkpoint_every and (e + 1) % train_cfg.checkpoint_every == 0:
                last_good = write_checkpoint(f"checkpoint_ep{e + 1:07d}.ckpt", e + 1)
    finally:
        if log_file:
            log_file.close()

    final = write_checkpoint("checkpoint_final.ckpt", train_cfg.episodes)
    return TrainResult(model=model, adam=adam, log_rows=log_rows,
                       final_checkpoint=final, sampler_state=_rng_state(sampler))


@dataclass
class EvalReport:
    accuracies: np.ndarray
    mean: float
    ci95: float
    reps: int
    episodes_per_rep: int
    seed: int
    config_digest: str = ""
    wall_clock_sec: float = 0.0

    def to_json_dict(self):
        # wall clock deliberately excluded: reports must be bit-identical
        # across same-seed runs
        return {
            "mean": self.mean,
            "ci95": self.ci95,
            "reps": self.reps,
            "episodes_per_rep": self.episodes_per_rep,
            "seed": self.seed,
            "config_digest": self.config_digest,
        }


def ci95_halfwidth(values):
    """1.96 * sample standard deviation / sqrt(n)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / np.sqrt(values.size))


def evaluate(model, split, episodes_per_rep, reps, ep_cfg, pg,
             use_protogen=True, seed=0, threads=1, config_digest=""):
    """Mean episode accuracy with a 95% confidence halfwidth.

    Every (repetition, episode) pair draws from its own deterministic rng
    stream, so results are independent of evaluation order and thread
    count.
    """
    t0 = time.perf_counter()

    def one(task):
        rep, i = task
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(rep, i)))
        episode = sample_episode(split, ep_cfg, rng)
        with no_grad():
            _, report = forward_episode(episode, model, pg,
                                        use_protogen=use_protogen, mode="eval")
        return report.accuracy

    tasks = [(r, i) for r in range(reps) for i in range(episodes_per_rep)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(one, tasks))
    else:
        accs = [one(t) for t in tasks]
    accs = np.asarray(accs)
    return EvalReport(accuracies=accs, mean=float(accs.mean()),
                      ci95=ci95_halfwidth(accs), reps=reps,
                      episodes_per_rep=episodes_per_rep, seed=seed,
                      config_digest=config_digest,
                      wall_clock_sec=time.perf_counter() - t0)


def ablate(grid, model_cfg, train_cfg, bundle, eval_split="test",
           eval_episodes=200, eval_reps=1, eval_seed=1234, out_dir=None,
           config_text="", config_digest=""):
    """Train + evaluate one model per grid cell with a shared base seed.

    Returns rows of (cell, mean, ci95, status); failed cells are marked
    and the run continues.
    """
    from dataclasses import replace
    if not grid:
        raise ConfigError("ablation grid is empty")
    rows = []
    for cell in grid:
        mc = replace(model_cfg,
                     attention=cell.get("attention", True),
                     hierarchy=cell.get("hierarchy", True),
                     reduction=0)
        pg = PGConfig(xi=cell.get("xi", train_cfg.pg.xi),
                      similarity=cell.get("similarity", train_cfg.pg.similarity),
                      clamp_xi=train_cfg.pg.clamp_xi)
        tc = replace(train_cfg, pg=pg, protogen=cell.get("protogen", True))
        cell_dir = None
        if out_dir:
            tag = "a{:d}h{:d}p{:d}_xi{}_{}".format(
                int(mc.attention), int(mc.hierarchy), int(tc.protogen),
                pg.xi, pg.similarity)
            cell_dir = os.path.join(out_dir, tag)
        try:
            result = train(tc, mc, bundle.split("train"), out_dir=cell_dir,
                           config_text=config_text, config_digest=config_digest)
            report = evaluate(result.model, bundle.split(eval_split),
                              eval_episodes, eval_reps, tc.episode, pg,
                              use_protogen=tc.protogen, seed=eval_seed,
                              config_digest=config_digest)
            rows.append({**cell, "mean": report.mean, "ci95": report.ci95,
                         "status": "ok"})
        except Exception as exc:  # noqa: BLE001 - per-cell isolation is the contract
            rows.append({**cell, "mean": float("nan"), "ci95": float("nan"),
                         "status": f"FAILED: {type(exc).__name__}: {exc}"})
    return rows
