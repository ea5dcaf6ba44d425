"""Training with cross-entropy plus self-consistency, the acquisition loop, retraining and metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .acquisition import Strategy, select_regions
from .data import (
    PoolState,
    RegionGrid,
    Sample,
    oracle_label,
    stack,
    visible_targets,
    warm_start,
)
from .model import ModelConfig, SegModel, backward, forward, forward_pair, init_model, pair_backward, predict_logits
from .numerics import IGNORE, consistency_loss, masked_cross_entropy, softmax_channel
from .transforms import HFLIP, TransformKind

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    use_consistency: bool = False
    norm: str = "l2"
    kind: TransformKind = HFLIP
    theta: float = 0.04
    augment_hflip: bool = True
    weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.norm not in ("l2", "l1"):
            raise ValueError(f"norm must be 'l2' or 'l1', got {self.norm!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_round: int = 5
    final_epochs: int = 60
    batch_size: int = 4
    lr: float = 5e-4
    weight_decay: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.1
    lr_decay_every: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs_per_round", "final_epochs", "batch_size", "lr_decay_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def adam_hyper(self) -> dict:
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay)


@dataclass
class LossRecord:
    epoch: int
    batch: int
    total: float
    ce: float
    sc: float


@dataclass
class MetricsRecord:
    iou: List[float]
    miou: float
    diversity_entropy: float = float("nan")
    inconsistency: float = float("nan")
    budget: float = float("nan")
    strategy: str = ""
    seed: int = 0
    round: int = 0


class TrainingError(RuntimeError):
    pass


def _eligible(pool: PoolState, loss_cfg: LossConfig) -> np.ndarray:
    has_labels = pool.labeled.any(axis=1)
    if not loss_cfg.use_consistency:
        return has_labels
    frac = pool.labeled.mean(axis=1)
    return has_labels | (frac >= loss_cfg.theta)


def train(model: SegModel, dataset: List[Sample], pool: PoolState, grid: RegionGrid,
          loss_cfg: LossConfig, train_cfg: TrainConfig, epochs: Optional[int] = None,
          lr_schedule: bool = False, arrays: Optional[Tuple[np.ndarray, np.ndarray]] = None,
          round_index: int = 0) -> List[LossRecord]:
    """Minimise masked CE (+ consistency) over images that carry labels.

    Consistency is added for images whose labeled fraction reaches ``theta``;
    for those images the CE term covers both branches of the pair. One Adam
    step per batch on the summed loss.
    """
    x_all, y_all = arrays if arrays is not None else stack(dataset)
    targets = visible_targets(y_all, pool, grid)
    frac = pool.labeled.mean(axis=1)
    use_pair = loss_cfg.use_consistency & (frac >= loss_cfg.theta)
    eligible = np.nonzero(_eligible(pool, loss_cfg))[0]
    if eligible.size == 0:
        raise TrainingError("no labeled images to train on")

    rng = np.random.default_rng([train_cfg.seed, int(lr_schedule), round_index])
    epochs = epochs if epochs is not None else train_cfg.epochs_per_round
    trace: List[LossRecord] = []
    for epoch in range(epochs):
        if lr_schedule:
            model.set_lr(train_cfg.lr * train_cfg.lr_decay ** (epoch // train_cfg.lr_decay_every))
        order = eligible[rng.permutation(eligible.size)]
        flips = rng.random(order.size) < 0.5
        for b, start in enumerate(range(0, order.size, train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            xb, tb = x_all[idx], targets[idx]
            if loss_cfg.augment_hflip:
                f = flips[start:start + len(idx)]
                if f.any():
                    xb, tb = xb.copy(), tb.copy()
                    xb[f] = xb[f][..., ::-1]
                    tb[f] = tb[f][..., ::-1]
            rec, grads = _batch_loss(model, xb, tb, use_pair[idx], loss_cfg)
            if not math.isfinite(rec[0]):
                raise TrainingError(f"non-finite loss in round {round_index}, epoch {epoch}, images {idx.tolist()}")
            model.step(grads)
            trace.append(LossRecord(epoch, b, *rec))
    return trace


def _batch_loss(model: SegModel, xb: np.ndarray, tb: np.ndarray, pair: np.ndarray,
                loss_cfg: LossConfig) -> Tuple[Tuple[float, float, float], Dict[str, np.ndarray]]:
    grads: Dict[str, np.ndarray] = {}
    ce = sc = 0.0

    def accumulate(g):
        for k, v in g.items():
            grads[k] = grads[k] + v if k in grads else v

    single = ~pair
    if single.any():
        logits, caches = forward(model, xb[single])
        loss, g = masked_cross_entropy(softmax_channel(logits), tb[single])
        ce += loss
        accumulate(backward(model, caches, g))
    if pair.any():
        i0, i1, cache = forward_pair(model, xb[pair], loss_cfg.kind)
        l0, g0 = masked_cross_entropy(softmax_channel(i0), tb[pair])
        l1, g1 = masked_cross_entropy(softmax_channel(i1), tb[pair])
        ls, s0, s1 = consistency_loss(i0, i1, loss_cfg.norm)
        ce += l0 + l1
        sc += loss_cfg.weight * ls
        accumulate(pair_backward(model, cache, g0 + loss_cfg.weight * s0, g1 + loss_cfg.weight * s1))
    return (ce + sc, ce, sc), grads


# --------------------------------------------------------------------------
# acquisition loop
# --------------------------------------------------------------------------


def budget_target(budget: float, total: int) -> int:
    """Smallest region count covering ``budget`` of the pool, computed exactly."""
    return min(total, math.ceil(Fraction(repr(float(budget))) * total))


@dataclass
class RoundLog:
    round: int
    regions: list
    scores: list
    labeled: int
    losses: List[LossRecord] = field(default_factory=list)


@dataclass
class LoopResult:
    pool: PoolState
    rounds: List[RoundLog]
    snapshots: Dict[float, Tuple[PoolState, int]]
    model: SegModel


def active_loop(dataset: List[Sample], grid: RegionGrid, strategy: Strategy, k: int, budget: float,
                model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig,
                checkpoints: Sequence[float] = (), warm_start_regions: int = 0,
                pool: Optional[PoolState] = None) -> LoopResult:
    """Select, label, retrain until the labeled fraction reaches ``budget``.

    The model starts from random weights and persists across rounds. Pool
    copies are kept for each ``checkpoints`` fraction at the round it is first
    met. ``loss_cfg`` governs the in-loop training.
    """
    if not 0.0 < budget <= 1.0:
        raise ValueError("budget must lie in (0, 1]")
    pool = pool if pool is not None else PoolState(len(dataset), grid.per_image)
    arrays = stack(dataset)
    model = init_model(model_cfg, **train_cfg.adam_hyper())
    target = budget_target(budget, pool.total)
    marks = sorted({float(b) for b in checkpoints} | {float(budget)})
    snapshots: Dict[float, Tuple[PoolState, int]] = {}
    rounds: List[RoundLog] = []

    if warm_start_regions:
        warm_start(pool, warm_start_regions, np.random.default_rng([train_cfg.seed, 7919]))
        if strategy.name != "random" and pool.labeled_count < target:
            train(model, dataset, pool, grid, loss_cfg, train_cfg, arrays=arrays, round_index=0)

    def take_snapshots(r):
        for b in marks:
            if b not in snapshots and pool.labeled_count >= budget_target(b, pool.total):
                snapshots[b] = (pool.copy(), r)

    take_snapshots(0)
    r = 0
    while pool.labeled_count < target:
        r += 1
        sel = select_regions(model, dataset, pool, grid, strategy, k,
                             seed=np.random.SeedSequence([train_cfg.seed, r]).generate_state(1)[0],
                             inputs=arrays[0])
        for rid in sel.regions:
            oracle_label(pool, rid)
        log_r = RoundLog(r, list(sel.regions), list(sel.scores), pool.labeled_count)
        take_snapshots(r)
        # random selection ignores the model; the last round's update is never used
        if strategy.name != "random" and pool.labeled_count < target:
            log_r.losses = train(model, dataset, pool, grid, loss_cfg, train_cfg, arrays=arrays, round_index=r)
        rounds.append(log_r)
    return LoopResult(pool, rounds, snapshots, model)


def final_retrain(dataset: List[Sample], pool: PoolState, grid: RegionGrid, model_cfg: ModelConfig,
                  loss_cfg: LossConfig, train_cfg: TrainConfig,
                  trace: Optional[List[LossRecord]] = None) -> SegModel:
    """Fresh random init trained for ``final_epochs`` with step lr decay (no pretraining)."""
    if pool.labeled_count == 0:
        raise ValueError("final retraining needs a non-empty labeled set")
    model = init_model(model_cfg, **train_cfg.adam_hyper())
    losses = train(model, dataset, pool, grid, loss_cfg, train_cfg, epochs=train_cfg.final_epochs,
                   lr_schedule=True)
    if trace is not None:
        trace.extend(losses)
    return model


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """``cm[true, predicted]`` pixel counts, IGNORE pixels skipped."""
    keep = gt != IGNORE
    idx = gt[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> Tuple[List[float], float]:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.maximum(denom, 1), 1.0)
    present = cm.sum(axis=1) > 0
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return [float(v) for v in iou], miou


def evaluate(model: SegModel, dataset: List[Sample]) -> MetricsRecord:
    x, y = stack(dataset)
    pred = predict_logits(model, x).argmax(axis=1)
    iou, miou = iou_from_confusion(confusion_matrix(y, pred, model.cfg.num_classes))
    return MetricsRecord(iou, miou)


def inconsistency(model: SegModel, dataset: List[Sample], kind: TransformKind = HFLIP, chunk: int = 4) -> float:
    """Mean over images of the L2 consistency loss between the two branches."""
    x, _ = stack(dataset)
    total = 0.0
    for i in range(0, len(x), chunk):
        i0, i1, _ = forward_pair(model, x[i:i + chunk], kind)
        d = (i0 - i1).reshape(len(i0), -1)
        total += float(((2.0 / d.shape[1]) * (d * d).sum(axis=1)).sum())
    return total / len(x)

