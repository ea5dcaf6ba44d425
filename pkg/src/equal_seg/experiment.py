"""Budget sweeps, ablations and multi-seed orchestration."""

from __future__ import annotations

import csv
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .acquisition import Strategy, diversity_entropy
from .config import ExperimentConfig, serialize_config
from .data import RegionGrid, generate_dataset, save_dataset
from .model import save_checkpoint
from .results import ResultRow, ResultsTable, ResultsWriter, write_pivot, write_results
from .trainer import active_loop, evaluate, final_retrain, inconsistency
from .transforms import TransformKind

log = logging.getLogger(__name__)

DEVIATIONS = [
    "no pretraining: final retraining starts from a fresh random initialisation",
    "warm selection-phase training: one model persists across acquisition rounds",
    "synthetic procedural scenes replace real street-scene datasets",
    "small 3x3 fully-convolutional network replaces a ResNet50+FCN backbone",
    "translation transforms use a fixed circular offset per run",
]

ABLATIONS = ("transform", "loss_norm", "region_size")


@dataclass(frozen=True)
class Variant:
    label: str
    strategy: Strategy
    loop_consistency: bool
    norm: str
    region: Tuple[int, int]
    retrain: Tuple[str, ...]
    # ablation variants that ask for "ce+sc" explicitly bypass the plus_* filters
    plus_everywhere: bool = False


def plus_label(label: str) -> str:
    """'equal' -> 'equal+', 'equal[l1]' -> 'equal+[l1]'."""
    if "[" in label:
        head, tail = label.split("[", 1)
        return f"{head}+[{tail}"
    return label + "+"


def _loop_consistency(cfg: ExperimentConfig, name: str) -> bool:
    return cfg.loop_consistency if cfg.loop_consistency is not None else name == "equal"


def default_variants(cfg: ExperimentConfig) -> List[Variant]:
    return [Variant(name, cfg.strategy_for(name), _loop_consistency(cfg, name), cfg.consistency_norm,
                    (cfg.region_height, cfg.region_width), tuple(cfg.retrain))
            for name in cfg.strategy]


def default_region_sizes(height: int, width: int) -> List[int]:
    side = math.gcd(height, width)
    return [d for d in range(4, side + 1) if side % d == 0]


def metadata(cfg: ExperimentConfig) -> dict:
    meta = {
        "deviations": list(DEVIATIONS),
        "versions": {"equal_seg": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "seeds": list(cfg.seeds),
        "failures": [],
        "warnings": [],
    }
    if cfg.consistency_weight != 1.0:
        meta["consistency_weight"] = cfg.consistency_weight
    if "translate" in cfg.transform or any(t.startswith("translate") for t in cfg.ablation_transforms):
        meta["translation"] = "fixed (dx, dy) per run, circular wraparound"
    return meta


class _Logs:
    """Side CSVs: one row per acquired region and one row per training epoch."""

    ACQ = ["strategy", "seed", "round", "image", "region", "score"]
    LOSS = ["strategy", "seed", "phase", "budget", "round", "epoch", "batches", "total", "ce", "sc"]

    def __init__(self, out: Path, name: str):
        self.acq = out / f"{name}_acquisitions.csv"
        self.loss = out / f"{name}_losses.csv"
        for path, head in ((self.acq, self.ACQ), (self.loss, self.LOSS)):
            with open(path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(head)

    def extend(self, acq_rows, loss_rows) -> None:
        for path, rows in ((self.acq, acq_rows), (self.loss, loss_rows)):
            with open(path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerows(rows)


def _acq_rows(label, seed, rounds) -> list:
    return [[label, seed, r.round, rid.image, rid.region, f"{score:.6f}"]
            for r in rounds for rid, score in zip(r.regions, r.scores)]


def _loss_rows(label, seed, phase, budget, rnd, trace) -> list:
    by_epoch: dict = {}
    for rec in trace:
        acc = by_epoch.setdefault(rec.epoch, [0, 0.0, 0.0, 0.0])
        acc[0] += 1
        acc[1] += rec.total
        acc[2] += rec.ce
        acc[3] += rec.sc
    return [[label, seed, phase, f"{budget:.6f}", rnd, epoch, nb, f"{tot:.6f}", f"{ce:.6f}", f"{sc:.6f}"]
            for epoch, (nb, tot, ce, sc) in sorted(by_epoch.items())]


@dataclass
class SeedOutput:
    rows: List[ResultRow]
    acquisitions: list
    losses: list


@lru_cache(maxsize=4)
def _datasets(data_seed, count, eval_count, height, width, in_channels, num_classes):
    train = generate_dataset(data_seed, count, height, width, in_channels, num_classes)
    held_out = generate_dataset(data_seed + 1, eval_count, height, width, in_channels, num_classes)
    return train, held_out


def _cfg_datasets(cfg: ExperimentConfig):
    return _datasets(cfg.data_seed, cfg.count, cfg.eval_count, cfg.height, cfg.width, cfg.in_channels,
                     cfg.num_classes)


def run_seed(cfg: ExperimentConfig, v: Variant, seed: int, out: Optional[Path] = None) -> SeedOutput:
    """One seed of one variant: a single acquisition run with budget snapshots,
    then a from-scratch retrain and evaluation per (budget, retrain mode)."""
    train_ds, eval_ds = _cfg_datasets(cfg)
    grid = RegionGrid(cfg.height, cfg.width, *v.region)
    model_cfg = cfg.model_config(seed)
    train_cfg = cfg.train_config(seed)
    loop_loss = cfg.loss_config(v.loop_consistency, v.strategy.kind, v.norm)
    log.info("%s seed %d: acquisition to %.3f", v.label, seed, cfg.budgets[-1])
    res = active_loop(train_ds, grid, v.strategy, cfg.k, cfg.budgets[-1], model_cfg, loop_loss, train_cfg,
                      checkpoints=cfg.budgets, warm_start_regions=cfg.warm_start_regions)
    result = SeedOutput([], _acq_rows(v.label, seed, res.rounds), [])
    for r in res.rounds:
        result.losses += _loss_rows(v.label, seed, "select", float("nan"), r.round, r.losses)

    for budget in cfg.budgets:
        pool, rnd = res.snapshots[float(budget)]
        div = diversity_entropy(pool, train_ds, grid, cfg.num_classes)
        for mode in v.retrain:
            if mode == "ce+sc" and not v.plus_everywhere and (
                    v.strategy.name not in cfg.plus_strategies
                    or (cfg.plus_budgets and float(budget) not in cfg.plus_budgets)):
                continue
            label = v.label if mode == "ce" else plus_label(v.label)
            t0 = time.perf_counter()
            trace: list = []
            model = final_retrain(train_ds, pool, grid, model_cfg,
                                  cfg.loss_config(mode == "ce+sc", v.strategy.kind, v.norm), train_cfg, trace)
            metrics = evaluate(model, eval_ds)
            inc = inconsistency(model, eval_ds, v.strategy.kind)
            wall = time.perf_counter() - t0 if cfg.record_timing else float("nan")
            result.rows.append(ResultRow(label, budget, seed, rnd, metrics.miou, metrics.iou, div, inc, wall))
            result.losses += _loss_rows(label, seed, "retrain", budget, rnd, trace)
            if cfg.save_checkpoints and out is not None:
                save_checkpoint(model, out / "checkpoints" / f"{label}_b{budget:g}_s{seed}.npz")
            log.info("%s b=%.2f seed=%d miou=%.4f", label, budget, seed, metrics.miou)
    return result


def _jobs(cfg: ExperimentConfig, variants: Sequence[Variant], out: Path) -> Iterator[Tuple[Variant, int, object]]:
    """Yield (variant, seed, SeedOutput | exception) in a fixed order."""
    pairs = [(v, seed) for v in variants for seed in cfg.seeds]
    if cfg.workers == 1 or len(pairs) == 1:
        for v, seed in pairs:
            try:
                yield v, seed, run_seed(cfg, v, seed, out)
            except Exception as e:  # one failed seed must not sink the sweep
                log.exception("variant %s seed %d failed", v.label, seed)
                yield v, seed, e
        return
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(run_seed, cfg, v, seed, out) for v, seed in pairs]
        for (v, seed), fut in zip(pairs, futures):
            try:
                yield v, seed, fut.result()
            except Exception as e:
                log.error("variant %s seed %d failed: %r", v.label, seed, e)
                yield v, seed, e


def _execute(cfg: ExperimentConfig, variants: Sequence[Variant], out: Path, name: str,
             table: Optional[ResultsTable] = None) -> ResultsTable:
    out.mkdir(parents=True, exist_ok=True)
    for v in variants:
        RegionGrid(cfg.height, cfg.width, *v.region)
    if cfg.save_checkpoints:
        (out / "checkpoints").mkdir(exist_ok=True)
        save_dataset(_cfg_datasets(cfg)[1], out / "eval_data.npz", cfg.data_seed + 1, cfg.num_classes)
    table = table or ResultsTable(cfg.num_classes, metadata=metadata(cfg))
    writer = ResultsWriter(out / f"{name}.csv", cfg.num_classes)
    for row in table.rows:
        writer.append(row)
    logs = _Logs(out, name)
    started = time.perf_counter()

    # the single writer: rows land in (variant, seed) order whatever the worker count
    for v, seed, res in _jobs(cfg, variants, out):
        if isinstance(res, Exception):
            table.metadata["failures"].append({"strategy": v.label, "seed": seed, "error": repr(res)})
            continue
        for row in res.rows:
            writer.append(table.add(row))
        logs.extend(res.acquisitions, res.losses)

    if cfg.record_timing:
        table.metadata["wall_s_total"] = round(time.perf_counter() - started, 3)
    write_results(table, out / f"{name}.csv", config=cfg.to_dict())
    (out / f"{name}_config.yaml").write_text(serialize_config(cfg))
    return table


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None) -> ResultsTable:
    """Acquire to the largest budget per seed, snapshotting the pool at each
    budget, then retrain from scratch and evaluate at every snapshot."""
    return _execute(cfg, default_variants(cfg), Path(out or cfg.output), "results")


def ablation_variants(kind: str, cfg: ExperimentConfig) -> Tuple[List[Variant], List[str]]:
    region = (cfg.region_height, cfg.region_width)
    entropy = Variant("entropy", cfg.strategy_for("entropy"), False, cfg.consistency_norm, region, ("ce",))
    skipped: List[str] = []
    if kind == "transform":
        out = []
        for t in cfg.ablation_transforms:
            tk = TransformKind.parse(t)
            out.append(Variant(f"equal[{tk}]", cfg.strategy_for("equal", tk), _loop_consistency(cfg, "equal"),
                               cfg.consistency_norm, region, ("ce",)))
        return out + [entropy], skipped
    if kind == "loss_norm":
        return [entropy] + [
            Variant(f"equal[{norm}]", cfg.strategy_for("equal"), True, norm, region, ("ce+sc",), True)
            for norm in ("l2", "l1")
        ], skipped
    if kind == "region_size":
        sizes = [(s, s) for s in (cfg.region_sizes or default_region_sizes(cfg.height, cfg.width))]
        if (cfg.height, cfg.width) not in sizes:
            sizes.append((cfg.height, cfg.width))
        out = []
        for rh, rw in sizes:
            label = f"equal[{rh}x{rw}]"
            if cfg.height % rh or cfg.width % rw:
                skipped.append(label)
                continue
            out.append(Variant(label, cfg.strategy_for("equal"), _loop_consistency(cfg, "equal"),
                               cfg.consistency_norm, (rh, rw), ("ce",)))
        return out, skipped
    raise ValueError(f"unknown ablation {kind!r}; expected one of {', '.join(ABLATIONS)}")


def run_ablation(kind: str, cfg: ExperimentConfig, out: Optional[str] = None) -> ResultsTable:
    """Hold everything but one factor fixed and sweep it; writes the raw rows and
    a strategies-by-budgets table of mean mIoU."""
    variants, skipped = ablation_variants(kind, cfg)
    table = ResultsTable(cfg.num_classes, metadata=metadata(cfg))
    table.metadata["ablation"] = kind
    for label in skipped:
        msg = f"{label}: region size does not divide {cfg.height}x{cfg.width}; skipped"
        log.warning(msg)
        table.metadata["warnings"].append(msg)
        for budget in cfg.budgets:
            table.add(ResultRow(f"{label}:skipped", budget, cfg.seeds[0], 0, float("nan"),
                                [float("nan")] * cfg.num_classes, float("nan"), float("nan")))
    out_dir = Path(out or cfg.output)
    table = _execute(cfg, variants, out_dir, f"ablation_{kind}", table)
    write_pivot(table, out_dir / f"ablation_{kind}_table.csv")
    return table
