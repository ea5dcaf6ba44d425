"""Experiment configuration: a flat YAML mapping of typed keys.

Grammar: one ``key: value`` pair per line (YAML block mapping). Values are
ints, floats, booleans, strings or flat lists of those. Unknown keys, wrong
types and invariant violations raise :class:`ConfigError` naming the key.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from .acquisition import STRATEGIES, Strategy
from .model import ModelConfig
from .trainer import LossConfig, TrainConfig
from .transforms import TransformKind

OUTPUT_ENV = "EQUAL_SEG_OUT"
RETRAIN_MODES = ("ce", "ce+sc")


class ConfigError(ValueError):
    pass


def _default_output() -> str:
    return os.environ.get(OUTPUT_ENV, "results")


@dataclass
class ExperimentConfig:
    # data
    count: int = 200
    eval_count: int = 50
    height: int = 32
    width: int = 32
    in_channels: int = 5
    num_classes: int = 4
    data_seed: int = 0
    # acquisition
    region_height: int = 8
    region_width: int = 8
    strategy: List[str] = field(default_factory=lambda: ["equal"])
    transform: str = "hflip"
    pair_mode: str = "sum"
    k: int = 4
    budgets: List[float] = field(default_factory=lambda: [0.08, 0.12, 0.16, 0.20, 0.24])
    warm_start_regions: int = 0
    # losses; loop_consistency null means "on for the equal strategy only"
    loop_consistency: Optional[bool] = None
    retrain: List[str] = field(default_factory=lambda: ["ce"])
    # "ce+sc" retraining is limited to these strategies and budgets (empty list = every budget)
    plus_strategies: List[str] = field(default_factory=lambda: ["equal"])
    plus_budgets: List[float] = field(default_factory=list)
    consistency_norm: str = "l2"
    theta: float = 0.04
    consistency_weight: float = 1.0
    augment_hflip: bool = True
    # model / optimisation
    hidden: List[int] = field(default_factory=lambda: [16, 16])
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
    # runs
    seeds: List[int] = field(default_factory=lambda: [0])
    output: str = field(default_factory=_default_output)
    save_checkpoints: bool = False
    record_timing: bool = False
    # seeds run in this many worker processes; rows are still written in seed order
    workers: int = 1
    # ablations
    ablation_transforms: List[str] = field(
        default_factory=lambda: ["hflip", "vflip", "rot90", "rot180", "translate:2,0"])
    region_sizes: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}")

        for key in ("count", "eval_count", "height", "width", "in_channels", "num_classes",
                    "region_height", "region_width", "k", "epochs_per_round", "final_epochs",
                    "batch_size", "lr_decay_every", "workers"):
            need(getattr(self, key) >= 1, key, "must be positive")
        need(self.height >= 16 and self.width >= 16, "height", "scenes must be at least 16x16")
        need(self.num_classes >= 2, "num_classes", "must be >= 2")
        need(self.in_channels >= self.num_classes, "in_channels", "must be >= num_classes")
        need(self.height % self.region_height == 0, "region_height", f"must divide height {self.height}")
        need(self.width % self.region_width == 0, "region_width", f"must divide width {self.width}")
        need(len(self.strategy) >= 1, "strategy", "at least one strategy")
        for s in self.strategy:
            need(s in STRATEGIES, "strategy", f"unknown strategy {s!r}")
        try:
            TransformKind.parse(self.transform)
            for t in self.ablation_transforms:
                TransformKind.parse(t)
        except ValueError as e:
            raise ConfigError(f"transform: {e}") from None
        need(self.pair_mode in ("sum", "mean"), "pair_mode", "must be 'sum' or 'mean'")
        need(len(self.budgets) >= 1, "budgets", "at least one budget")
        need(all(0 < b <= 1 for b in self.budgets), "budgets", "each budget must lie in (0, 1]")
        need(all(a < b for a, b in zip(self.budgets, self.budgets[1:])), "budgets", "must be strictly increasing")
        need(self.warm_start_regions >= 0, "warm_start_regions", "must be >= 0")
        need(len(self.retrain) >= 1 and all(m in RETRAIN_MODES for m in self.retrain), "retrain",
             f"entries must be from {RETRAIN_MODES}")
        need(all(b in self.budgets for b in self.plus_budgets), "plus_budgets", "entries must appear in budgets")
        need(all(p in STRATEGIES for p in self.plus_strategies), "plus_strategies", "unknown strategy")
        need(self.consistency_norm in ("l2", "l1"), "consistency_norm", "must be 'l2' or 'l1'")
        need(0 <= self.theta <= 1, "theta", "must lie in [0, 1]")
        need(len(self.hidden) >= 1 and all(h >= 1 for h in self.hidden), "hidden", "positive widths, at least one")
        need(self.lr > 0, "lr", "must be positive")
        need(len(self.seeds) >= 1, "seeds", "at least one seed")
        need(all(s >= 0 for s in self.seeds), "seeds", "seeds must be non-negative")
        need(all(r >= 1 for r in self.region_sizes), "region_sizes", "must be positive")

    # ------------------------------------------------------------------
    @property
    def kind(self) -> TransformKind:
        return TransformKind.parse(self.transform)

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(self.in_channels, tuple(self.hidden), self.num_classes, seed)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs_per_round, self.final_epochs, self.batch_size, self.lr,
                           self.weight_decay, self.beta1, self.beta2, self.eps, self.lr_decay,
                           self.lr_decay_every, seed)

    def loss_config(self, use_consistency: bool, kind: Optional[TransformKind] = None,
                    norm: Optional[str] = None) -> LossConfig:
        return LossConfig(use_consistency, norm or self.consistency_norm, kind or self.kind,
                          self.theta, self.augment_hflip, self.consistency_weight)

    def strategy_for(self, name: str, kind: Optional[TransformKind] = None) -> Strategy:
        return Strategy(name, kind or self.kind, self.pair_mode)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig().to_dict()


def _coerce(key: str, value: Any) -> Any:
    default = _DEFAULTS[key]
    if key == "loop_consistency":
        if value is None or isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true, false or null, got {value!r}")
    if key == "strategy" and isinstance(value, str):
        value = [value]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        kinds = {"budgets": float, "plus_budgets": float, "seeds": int, "hidden": int, "region_sizes": int}
        want = kinds.get(key, str)
        out = []
        for v in value:
            if want is float and isinstance(v, (int, float)) and not isinstance(v, bool):
                out.append(float(v))
            elif want is int and isinstance(v, int) and not isinstance(v, bool):
                out.append(v)
            elif want is str and isinstance(v, str):
                out.append(v)
            else:
                raise ConfigError(f"{key}: list entry {v!r} is not a {want.__name__}")
        return out
    raise ConfigError(f"{key}: unsupported value {value!r}")


def config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    raw = dict(raw)
    if "budget" in raw:
        if "budgets" in raw:
            raise ConfigError("budget: give either 'budget' or 'budgets', not both")
        b = raw.pop("budget")
        raw["budgets"] = b if isinstance(b, list) else [b]
    if "seed" in raw:
        if "seeds" in raw:
            raise ConfigError("seed: give either 'seed' or 'seeds', not both")
        raw["seeds"] = [raw.pop("seed")]
    values = {}
    for key, value in raw.items():
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown key")
        values[key] = _coerce(key, value)
    return ExperimentConfig(**values)


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config: {e}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a key-value mapping")
    return config_from_dict(raw)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
