"""Synthetic segmentation scenes, the region grid and labeled/unlabeled pool bookkeeping."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Tuple

import numpy as np
from scipy.ndimage import uniform_filter

from .numerics import IGNORE

NOISE_SIGMA = 0.3


@dataclass
class Sample:
    x: np.ndarray  # [Cin, H, W]
    y: np.ndarray  # [H, W] int64, classes 0..C-1
    id: int


def _paint_scene(rng: np.random.Generator, h: int, w: int, num_classes: int) -> np.ndarray:
    y = np.zeros((h, w), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(2, 7))):
        cls = int(rng.integers(1, num_classes))
        if rng.random() < 0.5:
            rh = int(rng.integers(max(3, h // 8), h // 2 + 1))
            rw = int(rng.integers(max(3, w // 8), w // 2 + 1))
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            y[top:top + rh, left:left + rw] = cls
        else:
            r = float(rng.uniform(max(2.0, min(h, w) / 16), min(h, w) / 4))
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            y[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    return y


def render_input(y: np.ndarray, in_channels: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    onehot = (np.arange(num_classes)[:, None, None] == y[None]).astype(np.float64)
    x = np.zeros((in_channels,) + y.shape)
    x[:num_classes] = uniform_filter(onehot, size=(1, 3, 3), mode="nearest")
    x += rng.normal(0.0, NOISE_SIGMA, size=x.shape)
    return x


def generate_dataset(seed: int, count: int, height: int = 32, width: int = 32,
                     in_channels: int = 5, num_classes: int = 4) -> List[Sample]:
    """Background class 0 plus 2-6 occluding rectangles/discs of classes 1..C-1.

    Inputs are the 3x3 box-blurred one-hot class image in the first C channels
    (remaining channels carry noise only) plus Gaussian noise of sigma 0.3.
    """
    if height < 16 or width < 16:
        raise ValueError("scenes must be at least 16x16")
    if not 2 <= num_classes < IGNORE:
        raise ValueError(f"num_classes must be in 2..{IGNORE - 1}")
    if in_channels < num_classes:
        raise ValueError(f"in_channels ({in_channels}) must be >= num_classes ({num_classes})")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        while True:
            y = _paint_scene(rng, height, width, num_classes)
            if np.any(y == 0):
                break
        out.append(Sample(render_input(y, in_channels, num_classes, rng), y, i))
    return out


def stack(dataset: List[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    return np.stack([s.x for s in dataset]), np.stack([s.y for s in dataset])


def save_dataset(dataset: List[Sample], path: str | os.PathLike, seed: int, num_classes: int | None = None) -> None:
    x, y = stack(dataset)
    c = num_classes if num_classes is not None else int(y.max()) + 1
    header = np.array([len(dataset), x.shape[2], x.shape[3], x.shape[1], c, seed], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, header=header, x=x, y=y, ids=np.array([s.id for s in dataset], dtype=np.int64))


def load_dataset(path: str | os.PathLike) -> Tuple[List[Sample], dict]:
    """Returns the samples and the header (count, height, width, in_channels, num_classes, seed)."""
    with np.load(path) as z:
        hdr = z["header"]
        x, y, ids = z["x"], z["y"], z["ids"]
    keys = ("count", "height", "width", "in_channels", "num_classes", "seed")
    header = dict(zip(keys, (int(v) for v in hdr)))
    if len(x) != header["count"]:
        raise ValueError(f"{path}: header says {header['count']} samples, found {len(x)}")
    return [Sample(x[i], y[i], int(ids[i])) for i in range(len(x))], header


# --------------------------------------------------------------------------
# regions and pool
# --------------------------------------------------------------------------


class RegionId(NamedTuple):
    image: int
    region: int


@dataclass(frozen=True)
class RegionGrid:
    height: int
    width: int
    region_height: int
    region_width: int

    def __post_init__(self):
        if self.height % self.region_height or self.width % self.region_width:
            hs = [d for d in range(1, self.height + 1) if self.height % d == 0]
            ws = [d for d in range(1, self.width + 1) if self.width % d == 0]
            raise ValueError(
                f"{self.region_height}x{self.region_width} regions do not tile {self.height}x{self.width}; "
                f"valid region heights {hs}, widths {ws}"
            )

    @property
    def rows(self) -> int:
        return self.height // self.region_height

    @property
    def cols(self) -> int:
        return self.width // self.region_width

    @property
    def per_image(self) -> int:
        return self.rows * self.cols

    def rect(self, m: int) -> Tuple[int, int, int, int]:
        """(top, bottom, left, right) pixel bounds of region ``m``, row-major order."""
        if not 0 <= m < self.per_image:
            raise IndexError(f"region {m} outside 0..{self.per_image - 1}")
        r, c = divmod(m, self.cols)
        top, left = r * self.region_height, c * self.region_width
        return top, top + self.region_height, left, left + self.region_width

    def expand(self, per_region: np.ndarray) -> np.ndarray:
        """Broadcast ``[..., M]`` region values to ``[..., H, W]`` pixels."""
        grid = per_region.reshape(per_region.shape[:-1] + (self.rows, self.cols))
        return np.repeat(np.repeat(grid, self.region_height, axis=-2), self.region_width, axis=-1)

    def reduce_sum(self, pixel_map: np.ndarray) -> np.ndarray:
        """Sum ``[..., H, W]`` over each region -> ``[..., M]``."""
        lead = pixel_map.shape[:-2]
        blocks = pixel_map.reshape(lead + (self.rows, self.region_height, self.cols, self.region_width))
        return blocks.sum(axis=(-3, -1)).reshape(lead + (self.per_image,))


class PoolState:
    """Label status of every region of every image; Labeled never reverts."""

    def __init__(self, n_images: int, per_image: int):
        self.labeled = np.zeros((n_images, per_image), dtype=bool)
        self.labeled_count = 0

    @property
    def total(self) -> int:
        return self.labeled.size

    @property
    def unlabeled_count(self) -> int:
        return self.total - self.labeled_count

    def copy(self) -> "PoolState":
        other = PoolState(*self.labeled.shape)
        other.labeled = self.labeled.copy()
        other.labeled_count = self.labeled_count
        return other

    def is_labeled(self, rid: RegionId) -> bool:
        return bool(self.labeled[rid.image, rid.region])

    def unlabeled(self) -> List[RegionId]:
        return [RegionId(int(i), int(m)) for i, m in zip(*np.nonzero(~self.labeled))]

    def check(self) -> None:
        if int(self.labeled.sum()) != self.labeled_count:
            raise AssertionError("pool labeled count out of sync with statuses")

    def __eq__(self, other) -> bool:
        return isinstance(other, PoolState) and np.array_equal(self.labeled, other.labeled)


def build_pool(dataset: List[Sample], region_height: int, region_width: int) -> Tuple[RegionGrid, PoolState]:
    h, w = dataset[0].y.shape
    grid = RegionGrid(h, w, region_height, region_width)
    return grid, PoolState(len(dataset), grid.per_image)


def oracle_label(pool: PoolState, rid: RegionId) -> PoolState:
    """Reveal a region's ground truth (simulated annotator)."""
    if pool.labeled[rid.image, rid.region]:
        raise ValueError(f"region {tuple(rid)} is already labeled")
    pool.labeled[rid.image, rid.region] = True
    pool.labeled_count += 1
    pool.check()
    return pool


def label_mask(pool: PoolState, grid: RegionGrid, image: int) -> np.ndarray:
    return grid.expand(pool.labeled[image])


def visible_target(sample: Sample, pool: PoolState, grid: RegionGrid) -> np.ndarray:
    return np.where(label_mask(pool, grid, sample.id), sample.y, IGNORE)


def visible_targets(labels: np.ndarray, pool: PoolState, grid: RegionGrid) -> np.ndarray:
    """Batch form of :func:`visible_target` for stacked ``[N, H, W]`` ground truth."""
    return np.where(grid.expand(pool.labeled), labels, IGNORE)


def labeled_fraction(pool: PoolState) -> float:
    return pool.labeled_count / pool.total


def image_labeled_fraction(pool: PoolState, image: int) -> float:
    row = pool.labeled[image]
    return int(row.sum()) / row.size


def save_pool(pool: PoolState, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image", "region", "status"])
        n, m = pool.labeled.shape
        wr.writerow([n, m, "shape"])
        for i in range(n):
            for r in range(m):
                wr.writerow([i, r, "labeled" if pool.labeled[i, r] else "unlabeled"])


def load_pool(path: str | os.PathLike) -> PoolState:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    n, m, tag = rows[1]
    if tag != "shape":
        raise ValueError(f"{path}: line 2 must carry the pool shape")
    pool = PoolState(int(n), int(m))
    for lineno, (i, r, status) in enumerate(rows[2:], start=3):
        if status not in ("labeled", "unlabeled"):
            raise ValueError(f"{path}:{lineno}: bad status {status!r}")
        pool.labeled[int(i), int(r)] = status == "labeled"
    pool.labeled_count = int(pool.labeled.sum())
    return pool


def warm_start(pool: PoolState, count: int, rng: np.random.Generator) -> List[RegionId]:
    """Label ``count`` uniformly random unlabeled regions (cold-start studies)."""
    free = pool.unlabeled()
    picks = rng.choice(len(free), size=min(count, len(free)), replace=False)
    chosen = [free[int(p)] for p in sorted(picks)]
    for rid in chosen:
        oracle_label(pool, rid)
    return chosen


def iter_labeled_pixels(dataset: Iterable[Sample], pool: PoolState, grid: RegionGrid):
    for s in dataset:
        mask = label_mask(pool, grid, s.id)
        yield s.y[mask]
