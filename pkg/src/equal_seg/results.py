"""Results tables: raw per-run rows, per-(strategy, budget) aggregates, CSV + JSON persistence."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

log = logging.getLogger(__name__)

DECIMALS = 6


def _r(v: float) -> float:
    return float("nan") if math.isnan(v) else round(float(v), DECIMALS)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.{DECIMALS}f}"


def header(num_classes: int) -> List[str]:
    return (["strategy", "budget", "seed", "round", "miou"]
            + [f"iou_{c}" for c in range(num_classes)]
            + ["diversity_entropy", "inconsistency", "wall_s"])


@dataclass
class ResultRow:
    strategy: str
    budget: float
    seed: int
    round: int
    miou: float
    iou: List[float]
    diversity_entropy: float
    inconsistency: float
    wall_s: float = float("nan")

    def rounded(self) -> "ResultRow":
        return ResultRow(self.strategy, _r(self.budget), int(self.seed), int(self.round), _r(self.miou),
                         [_r(v) for v in self.iou], _r(self.diversity_entropy), _r(self.inconsistency),
                         _r(self.wall_s))

    def cells(self) -> List[str]:
        return ([self.strategy, _fmt(self.budget), str(self.seed), str(self.round), _fmt(self.miou)]
                + [_fmt(v) for v in self.iou]
                + [_fmt(self.diversity_entropy), _fmt(self.inconsistency), _fmt(self.wall_s)])

    def same_as(self, other: "ResultRow") -> bool:
        return self.cells() == other.cells()


@dataclass
class Aggregate:
    strategy: str
    budget: float
    n: int
    miou_mean: float
    miou_std: float
    diversity_mean: float
    inconsistency_mean: float


def _mean_std(values: List[float]):
    arr = np.array(values, dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    if arr.size == 0:
        return float("nan"), float("nan")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class ResultsTable:
    num_classes: int
    rows: List[ResultRow] = field(default_factory=list)
    metadata: Dict = field(default_factory=dict)

    def add(self, row: ResultRow) -> ResultRow:
        if len(row.iou) != self.num_classes:
            raise ValueError(f"row has {len(row.iou)} IoUs, table expects {self.num_classes}")
        row = row.rounded()
        self.rows.append(row)
        return row

    def aggregates(self) -> List[Aggregate]:
        groups: Dict[tuple, List[ResultRow]] = {}
        for r in self.rows:
            groups.setdefault((r.strategy, r.budget), []).append(r)
        out = []
        for (strategy, budget), rows in groups.items():
            m, s = _mean_std([r.miou for r in rows])
            d, _ = _mean_std([r.diversity_entropy for r in rows])
            i, _ = _mean_std([r.inconsistency for r in rows])
            out.append(Aggregate(strategy, budget, len(rows), m, s, d, i))
        return out

    def mean(self, strategy: str, budget: float, metric: str = "miou") -> float:
        vals = [getattr(r, metric) for r in self.rows if r.strategy == strategy and r.budget == _r(budget)]
        return _mean_std(vals)[0]

    def strategies(self) -> List[str]:
        return list(dict.fromkeys(r.strategy for r in self.rows))

    def budgets(self) -> List[float]:
        return sorted({r.budget for r in self.rows})

    def pivot(self, metric: str = "miou_mean") -> Dict[str, Dict[float, float]]:
        """strategy -> {budget: aggregate value}; the layout of a budget-sweep table."""
        out: Dict[str, Dict[float, float]] = {}
        for a in self.aggregates():
            out.setdefault(a.strategy, {})[a.budget] = getattr(a, metric)
        return out

    def __eq__(self, other) -> bool:
        return (isinstance(other, ResultsTable) and self.num_classes == other.num_classes
                and len(self.rows) == len(other.rows)
                and all(a.same_as(b) for a, b in zip(self.rows, other.rows)))


class ResultsWriter:
    """Appends rows to a CSV as they are produced; one writer per file."""

    def __init__(self, path: str | os.PathLike, num_classes: int):
        self.path = Path(path)
        self.num_classes = num_classes
        self.path.parent.mkdir(parents=True, exist_ok=True)
        # a sidecar left by an earlier run would describe different rows
        sidecar_path(self.path).unlink(missing_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(header(num_classes))

    def append(self, row: ResultRow) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row.rounded().cells())


def _parse_row(cells: List[str], num_classes: int) -> ResultRow:
    if len(cells) != len(header(num_classes)):
        raise ValueError(f"expected {len(header(num_classes))} fields, got {len(cells)}")
    f = [float(c) for c in cells[4:]]
    return ResultRow(cells[0], float(cells[1]), int(cells[2]), int(cells[3]), f[0],
                     f[1:1 + num_classes], f[1 + num_classes], f[2 + num_classes], f[3 + num_classes])


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(path).with_suffix(".json")


def summary_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p.with_name(p.stem + "_summary.csv")


def write_summary(table: ResultsTable, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["strategy", "budget", "n", "miou_mean", "miou_std", "diversity_entropy_mean",
                     "inconsistency_mean"])
        for a in table.aggregates():
            wr.writerow([a.strategy, _fmt(a.budget), a.n, _fmt(a.miou_mean), _fmt(a.miou_std),
                         _fmt(a.diversity_mean), _fmt(a.inconsistency_mean)])


def write_pivot(table: ResultsTable, path: str | os.PathLike, metric: str = "miou_mean") -> None:
    """Strategies as rows, budgets as columns."""
    budgets = table.budgets()
    piv = table.pivot(metric)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["strategy"] + [f"{b:g}" for b in budgets])
        for strategy, vals in piv.items():
            wr.writerow([strategy] + [_fmt(vals.get(b, float("nan"))) for b in budgets])


def write_results(table: ResultsTable, path: str | os.PathLike, config: Optional[dict] = None) -> None:
    """CSV of raw rows, a ``_summary.csv`` of aggregates and a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header(table.num_classes))
        for r in table.rows:
            wr.writerow(r.cells())
    write_summary(table, summary_path(path))
    side = {
        "num_classes": table.num_classes,
        "config": config,
        "metadata": table.metadata,
        "aggregates": [a.__dict__ for a in table.aggregates()],
    }
    with open(sidecar_path(path), "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True, default=str)


def read_results(path: str | os.PathLike) -> ResultsTable:
    """Load a results CSV. A damaged final line (interrupted run) is dropped with a
    warning; damage anywhere else raises with the line number."""
    path = Path(path)
    text = path.read_text()
    lines = list(csv.reader(io.StringIO(text)))
    if not lines:
        raise ValueError(f"{path}:1: empty results file")
    head = lines[0]
    n_iou = sum(1 for h in head if h.startswith("iou_"))
    if head != header(n_iou):
        raise ValueError(f"{path}:1: unexpected header {head}")
    side = sidecar_path(path)
    meta = {}
    stored = None
    if side.exists():
        with open(side) as fh:
            blob = json.load(fh)
        meta = blob.get("metadata", {})
        stored = blob.get("aggregates")
    table = ResultsTable(n_iou, metadata=meta)
    complete = text.endswith("\n")
    for lineno, cells in enumerate(lines[1:], start=2):
        last = lineno == len(lines)
        try:
            if last and not complete:
                raise ValueError("truncated line")
            table.rows.append(_parse_row(cells, n_iou))
        except ValueError as e:
            if last:
                log.warning("%s:%d: dropping incomplete final row (%s)", path, lineno, e)
                continue
            raise ValueError(f"{path}:{lineno}: {e}") from None
    if stored is not None:
        _check_aggregates(table, stored, path)
    return table


def _check_aggregates(table: ResultsTable, stored: List[dict], path) -> None:
    fresh = {(a.strategy, a.budget): a for a in table.aggregates()}
    for s in stored:
        a = fresh.get((s["strategy"], s["budget"]))
        if a is None:
            raise ValueError(f"{path}: aggregate for {s['strategy']}@{s['budget']} has no raw rows")
        for key in ("n", "miou_mean", "miou_std"):
            x, y = getattr(a, key), s[key]
            if isinstance(y, float) and math.isnan(y) and math.isnan(x):
                continue
            if y is None or abs(x - y) > 1e-9:
                raise ValueError(f"{path}: stored {key} for {s['strategy']}@{s['budget']} does not match raw rows")
