"""Metric-learning training and the iterative prune / fine-tune loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import PlaceDataset
from .pruning import PruneSchedule, prune_round, schedule_round
from .retrieval import (
    EmbeddingMap,
    ResourceReport,
    map_memory_bytes,
    match,
    measure_latency,
    model_memory_bytes,
    recalls,
    to_mib,
)
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class LossParams:
    alpha: float = 2.0
    beta: float = 50.0
    base: float = 0.5
    margin: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0.0 < self.base < 1.0:
            raise ValueError("base similarity must lie in (0, 1)")
        if self.margin < 0:
            raise ValueError("mining margin must be non-negative")


@dataclass
class ImpConfig:
    rounds: int = 25
    epochs_per_round: int = 2
    lr: float = 1e-4
    decay: float = 0.3
    decay_period: int = 5
    places_per_batch: int = 8
    views_per_place: int = 4
    reset_schedule: bool = True

    @property
    def total_epochs(self) -> int:
        return self.rounds * self.epochs_per_round


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    decay: float = 0.3
    decay_period: int = 5
    places_per_batch: int = 8
    views_per_place: int = 4


def mine_pairs(sims: np.ndarray, labels: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Multi-similarity mining: keep hard positives and hard negatives per anchor."""
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    min_pos = np.where(pos, sims, np.inf).min(axis=1, keepdims=True)
    max_neg = np.where(neg, sims, -np.inf).max(axis=1, keepdims=True)
    return pos & (sims - margin < max_neg), neg & (sims + margin > min_pos)


def multi_similarity_loss(descriptors: Tensor, labels, params: LossParams | None = None, mine: bool = True) -> Tensor:
    params = params or LossParams()
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("multi-similarity loss needs at least two places in the batch")
    sims = T.matmul(descriptors, T.transpose2d(descriptors))
    same = labels[:, None] == labels[None, :]
    if not (same & ~np.eye(len(labels), dtype=bool)).any():
        raise ValueError("multi-similarity loss needs at least two views of some place")
    if mine:
        pos, neg = mine_pairs(sims.data, labels, params.margin)
    else:
        pos, neg = same & ~np.eye(len(labels), dtype=bool), ~same
    dt = descriptors.dtype
    pos_t, neg_t = Tensor(pos.astype(dt)), Tensor(neg.astype(dt))
    shifted = T.add(sims, -params.base)
    pos_sum = T.tsum(T.mul(T.exp(T.mul(shifted, -params.alpha)), pos_t), axis=1)
    neg_sum = T.tsum(T.mul(T.exp(T.mul(shifted, params.beta)), neg_t), axis=1)
    pos_term = T.mul(T.log(T.add(pos_sum, 1.0)), 1.0 / params.alpha)
    neg_term = T.mul(T.log(T.add(neg_sum, 1.0)), 1.0 / params.beta)
    return T.mean(T.add(pos_term, neg_term))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params`` (Tensors)."""
    b1, b2 = betas
    if not state.m:
        state.m = [np.zeros_like(p.data, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p.data, dtype=np.float64) for p in params]
    state.t += 1
    c1, c2 = 1 - b1**state.t, 1 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.zeros_like(m) if g is None else g.astype(np.float64)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        T.zero_grad(self.params)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr, self.betas, self.eps)


def lr_at(epoch: int, base_lr: float, multiplier: float = 0.3, period: int = 5) -> float:
    return base_lr * multiplier ** (epoch // period)


# ---------------------------------------------------------------- loops

def place_batches(ds: PlaceDataset, places_per_batch: int, views_per_place: int, rng: np.random.Generator):
    """One epoch of (P places x V views) index batches; steps = len(ds) // (P * V)."""
    by_place = {int(p): np.flatnonzero(ds.place_ids == p) for p in ds.places}
    eligible = [p for p, idx in by_place.items() if len(idx) >= views_per_place]
    if len(eligible) < 2:
        raise ValueError("need at least two places with enough views per batch")
    per_batch = min(places_per_batch, len(eligible))
    steps = max(1, len(ds) // (per_batch * views_per_place))
    queue: list[int] = []
    for _ in range(steps):
        if len(queue) < per_batch:
            # top up without repeating a place already waiting in the queue
            queue += [int(x) for x in rng.permutation(eligible) if int(x) not in queue]
        chosen, queue = queue[:per_batch], queue[per_batch:]
        yield np.concatenate([rng.choice(by_place[p], views_per_place, replace=False) for p in chosen])


def train_epoch(model, ds: PlaceDataset, opt: Adam, lr: float, rng: np.random.Generator,
                places_per_batch: int = 8, views_per_place: int = 4, loss_params: LossParams | None = None) -> list[float]:
    losses = []
    for idx in place_batches(ds, places_per_batch, views_per_place, rng):
        opt.zero_grad()
        desc = model.forward(Tensor(ds.images[idx]))
        loss = multi_similarity_loss(desc, ds.place_ids[idx], loss_params)
        T.backward(loss)
        opt.step(lr)
        losses.append(float(loss.data))
    return losses


def train(model, ds: PlaceDataset, cfg: TrainConfig | None = None, seed: int = 0,
          loss_params: LossParams | None = None) -> list[float]:
    """Dense training; returns mean loss per epoch."""
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng([seed, 7])
    opt = Adam(model.parameters())
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.lr, cfg.decay, cfg.decay_period)
        losses = train_epoch(model, ds, opt, lr, rng, cfg.places_per_batch, cfg.views_per_place, loss_params)
        history.append(float(np.mean(losses)))
        log.info("epoch %d lr %.2e loss %.4f", epoch, lr, history[-1])
    return history


def evaluate(model, eval_ds: PlaceDataset, round_idx: int = 0, backbone_sparsity: float = 0.0,
             agg_sparsity: float = 0.0, timing: bool = True, map_size: int | None = None,
             warmup: int = 10, trials: int = 50) -> ResourceReport:
    """Build the map from the database split and score the query split.

    ``map_size`` sets N for the map-memory column (defaults to the database size).
    """
    db, q = eval_ds.subset("database"), eval_ds.subset("query")
    emap = EmbeddingMap(model.embed(db.images), db.place_ids)
    qdesc = model.embed(q.images)
    r = recalls(emap, qdesc, q.place_ids, (1, 5, 10))
    extract_ms = match_ms = float("nan")
    if timing:
        probe = Tensor(q.images[:1])
        extract_ms = measure_latency(lambda: model.forward(probe), warmup, trials).median_ms
        match_ms = measure_latency(lambda: match(emap, qdesc[0], 1), warmup, trials).median_ms
    n = map_size if map_size is not None else len(emap)
    return ResourceReport(
        round=round_idx,
        backbone_sparsity=round(backbone_sparsity, 6),
        agg_sparsity=round(agg_sparsity, 6),
        descriptor_dim=model.descriptor_dim,
        param_count=model.param_count,
        model_mib=to_mib(model_memory_bytes(model)),
        map_mib=to_mib(map_memory_bytes(n, model.descriptor_dim)),
        extract_ms=extract_ms,
        match_ms=match_ms,
        recall_at_1=r[1],
        recall_at_5=r[5],
        recall_at_10=r[10],
    )


class ImpAborted(RuntimeError):
    def __init__(self, message: str, reports: list[ResourceReport]):
        super().__init__(message)
        self.reports = reports


def imp_run(model, train_ds: PlaceDataset, eval_ds: PlaceDataset, schedule: PruneSchedule,
            cfg: ImpConfig | None = None, seed: int = 0, finetune: bool = True,
            loss_params: LossParams | None = None, timing: bool = True, map_size: int | None = None,
            on_round=None) -> list[ResourceReport]:
    """Prune ``model`` in place for rounds 1..R, fine-tuning after each surgery.

    The learning-rate schedule restarts every round. ``on_round(t, model, report)``
    is called after each evaluated round (checkpointing hook).
    """
    cfg = cfg or ImpConfig(rounds=schedule.rounds)
    rng = np.random.default_rng([seed, 11])
    reports: list[ResourceReport] = []
    epoch = 0
    for t in range(1, schedule.active_rounds + 1):
        try:
            s_b, s_a = schedule_round(schedule, t)
            prune_round(model, s_b, s_a, seed=seed + t)
            if finetune and cfg.epochs_per_round:
                opt = Adam(model.parameters())
                for e in range(cfg.epochs_per_round):
                    lr = lr_at(e if cfg.reset_schedule else epoch, cfg.lr, cfg.decay, cfg.decay_period)
                    train_epoch(model, train_ds, opt, lr, rng, cfg.places_per_batch, cfg.views_per_place, loss_params)
                    epoch += 1
            report = evaluate(model, eval_ds, t, s_b, s_a, timing=timing, map_size=map_size)
        except Exception as exc:
            raise ImpAborted(f"round {t} failed: {exc}", reports) from exc
        log.info("round %d: dim %d params %d R@1 %.3f", t, report.descriptor_dim, report.param_count, report.recall_at_1)
        reports.append(report)
        if on_round is not None:
            on_round(t, model, report)
    return reports
