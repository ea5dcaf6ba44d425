"""Pixel uncertainty, region scoring and greedy region selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .data import PoolState, RegionGrid, RegionId, Sample, stack
from .model import SegModel, forward_pair, predict_logits
from .numerics import pixel_entropy, softmax_channel
from .transforms import HFLIP, TransformKind

STRATEGIES = ("random", "entropy", "equal")


@dataclass(frozen=True)
class Strategy:
    name: str
    kind: TransformKind = HFLIP
    # "sum": sum of the two branch entropies; "mean": entropy of the averaged softmax
    pair_mode: str = "sum"

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; expected one of {', '.join(STRATEGIES)}")
        if self.pair_mode not in ("sum", "mean"):
            raise ValueError(f"pair_mode must be 'sum' or 'mean', got {self.pair_mode!r}")

    def __str__(self) -> str:
        return self.name


@dataclass
class Selection:
    regions: List[RegionId]
    scores: List[float] = field(default_factory=list)
    exhausted: bool = False


def uncertainty_maps(model: SegModel, x: np.ndarray, strategy: Strategy, chunk: int = 4) -> np.ndarray:
    """Per-pixel entropy maps ``[N, H, W]`` for a stacked input batch ``[N, Cin, H, W]``."""
    if strategy.name == "random":
        raise ValueError("the random strategy has no uncertainty map")
    maps = []
    for i in range(0, len(x), chunk):
        xb = x[i:i + chunk]
        if strategy.name == "entropy":
            maps.append(pixel_entropy(softmax_channel(predict_logits(model, xb, chunk))))
            continue
        i0, i1, _ = forward_pair(model, xb, strategy.kind)
        p0, p1 = softmax_channel(i0), softmax_channel(i1)
        if strategy.pair_mode == "sum":
            maps.append(pixel_entropy(p0) + pixel_entropy(p1))
        else:
            maps.append(pixel_entropy(0.5 * (p0 + p1)))
    return np.concatenate(maps, axis=0)


def uncertainty_map(model: SegModel, sample: Sample, strategy: Strategy) -> np.ndarray:
    return uncertainty_maps(model, sample.x[None], strategy)[0]


def region_scores(h: np.ndarray, grid: RegionGrid) -> np.ndarray:
    """Sum of pixel entropy inside each region; ``[H,W] -> [M]`` or ``[N,H,W] -> [N,M]``."""
    if h.shape[-2:] != (grid.height, grid.width):
        raise ValueError(f"map extents {h.shape[-2:]} do not match grid {grid.height}x{grid.width}")
    return grid.reduce_sum(h)


def top_k(scores: np.ndarray, labeled: np.ndarray, k: int) -> Selection:
    """Greedy argmax over unlabeled regions, repeated ``k`` times with exclusion.

    Ties go to the smallest (image, region) pair.
    """
    img, reg = np.nonzero(~labeled)
    if img.size == 0:
        raise ValueError("no unlabeled regions left in the pool")
    s = scores[img, reg]
    order = np.lexsort((reg, img, -s))[:k]
    picked = [RegionId(int(img[o]), int(reg[o])) for o in order]
    return Selection(picked, [float(s[o]) for o in order], exhausted=img.size <= k)


def select_regions(model: SegModel, dataset: List[Sample], pool: PoolState, grid: RegionGrid,
                   strategy: Strategy, k: int, seed: int = 0,
                   inputs: Optional[np.ndarray] = None) -> Selection:
    """Pick the next ``k`` regions to send to the oracle.

    The model is fixed within one call, so uncertainty maps are computed once
    for every image that still has unlabeled regions.
    """
    if pool.unlabeled_count == 0:
        raise ValueError("no unlabeled regions left in the pool")
    if k < 1:
        raise ValueError("k must be >= 1")
    if strategy.name == "random":
        free = pool.unlabeled()
        rng = np.random.default_rng(seed)
        n = min(k, len(free))
        picks = rng.choice(len(free), size=n, replace=False)
        return Selection([free[int(p)] for p in picks], [float("nan")] * n, exhausted=len(free) <= k)

    if inputs is None:
        inputs = stack(dataset)[0]
    open_images = np.nonzero(~pool.labeled.all(axis=1))[0]
    scores = np.full(pool.labeled.shape, -np.inf)
    maps = uncertainty_maps(model, inputs[open_images], strategy)
    scores[open_images] = region_scores(maps, grid)
    return top_k(scores, pool.labeled, k)


def class_histogram(pool: PoolState, labels: np.ndarray, grid: RegionGrid, num_classes: int) -> np.ndarray:
    mask = grid.expand(pool.labeled)
    return np.bincount(labels[mask].ravel(), minlength=num_classes)


def diversity_entropy(pool: PoolState, dataset: List[Sample], grid: RegionGrid,
                      num_classes: Optional[int] = None) -> float:
    """Entropy (nats) of the class distribution of ground-truth pixels inside labeled regions."""
    if pool.labeled_count == 0:
        raise ValueError("diversity entropy needs at least one labeled region")
    labels = np.stack([s.y for s in dataset])
    counts = class_histogram(pool, labels, grid, num_classes or int(labels.max()) + 1)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
