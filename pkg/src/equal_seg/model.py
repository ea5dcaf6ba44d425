"""A small fully-convolutional segmentation network and its paired forward pass."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import transforms
from .numerics import (
    AdamState,
    ShapeError,
    adam_step,
    conv2d,
    conv2d_backward,
    relu,
    relu_backward,
)
from .transforms import TransformKind


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 5
    hidden: Tuple[int, ...] = (16, 16)
    num_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")
        if self.in_channels < 1 or min(self.hidden) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def widths(self) -> List[int]:
        return [self.in_channels, *self.hidden, self.num_classes]


@dataclass
class SegModel:
    cfg: ModelConfig
    params: Dict[str, np.ndarray]
    adam: Dict[str, AdamState] = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.cfg.widths) - 1

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def reset_optimizer(self, **hyper) -> None:
        self.adam = {k: AdamState.zeros_like(p, **hyper) for k, p in self.params.items()}

    def set_lr(self, lr: float) -> None:
        for st in self.adam.values():
            st.lr = lr

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            self.params[name], self.adam[name] = adam_step(self.params[name], g, self.adam[name])


def init_model(cfg: ModelConfig, **adam_hyper) -> SegModel:
    """He-normal kernels (variance 2/fan_in), zero biases, seeded."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    widths = cfg.widths
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
        fan_in = cin * 9
        params[f"conv{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))
        params[f"conv{i}.bias"] = np.zeros(cout)
    model = SegModel(cfg, params)
    model.reset_optimizer(**adam_hyper)
    return model


def forward(model: SegModel, x: np.ndarray) -> Tuple[np.ndarray, list]:
    """Logits ``[C,H,W]`` (or ``[N,C,H,W]``) plus the caches backward needs."""
    cin = x.shape[-3] if x.ndim >= 3 else None
    if cin != model.cfg.in_channels:
        raise ShapeError(f"model expects {model.cfg.in_channels} input channels, got extents {x.shape}")
    caches = []
    h = x
    last = model.n_layers - 1
    for i in range(model.n_layers):
        h, cc = conv2d(h, model.params[f"conv{i}.weight"], model.params[f"conv{i}.bias"])
        mask = None
        if i < last:
            h, mask = relu(h)
        caches.append((cc, mask))
    return h, caches


def backward(model: SegModel, caches: list, grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
    grads = {}
    g = grad_logits
    for i in reversed(range(model.n_layers)):
        cc, mask = caches[i]
        if mask is not None:
            g = relu_backward(g, mask)
        g, dk, db = conv2d_backward(g, cc, need_input=i > 0)
        grads[f"conv{i}.weight"] = dk
        grads[f"conv{i}.bias"] = db
    return grads


def predict_logits(model: SegModel, x: np.ndarray, chunk: int = 4) -> np.ndarray:
    """Batched inference without keeping caches around."""
    if x.ndim == 3:
        return forward(model, x)[0]
    out = [forward(model, x[i:i + chunk])[0] for i in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0)


@dataclass
class PairCache:
    caches: list
    kind: TransformKind
    n: int
    single: bool


def forward_pair(model: SegModel, x: np.ndarray, kind: TransformKind) -> Tuple[np.ndarray, np.ndarray, PairCache]:
    """``I0 = f(x)`` and ``I1 = tau^-1(f(tau(x)))``, both in the frame of ``x``.

    The two branches run as one stacked batch.
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    n = len(xb)
    stacked = np.concatenate([xb, transforms.apply(kind, xb)], axis=0)
    logits, caches = forward(model, stacked)
    i0 = logits[:n]
    i1 = transforms.invert(kind, logits[n:])
    cache = PairCache(caches, kind, n, single)
    if single:
        return i0[0], i1[0], cache
    return i0, i1, cache


def pair_backward(model: SegModel, cache: PairCache, g0: np.ndarray, g1: np.ndarray) -> Dict[str, np.ndarray]:
    if cache.single:
        g0, g1 = g0[None], g1[None]
    # tau^-1 is a permutation, so its adjoint is tau
    g = np.concatenate([g0, transforms.apply(cache.kind, g1)], axis=0)
    return backward(model, cache.caches, g)


def save_checkpoint(model: SegModel, path: str | os.PathLike) -> None:
    """npz archive: one named ``.npy`` per parameter (each carries its own shape header)."""
    meta = np.array([model.cfg.in_channels, model.cfg.num_classes, model.cfg.seed, *model.cfg.hidden], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, __config__=meta, **model.params)


def load_checkpoint(path: str | os.PathLike) -> SegModel:
    with np.load(path) as z:
        meta = z["__config__"]
        cfg = ModelConfig(in_channels=int(meta[0]), num_classes=int(meta[1]), seed=int(meta[2]),
                          hidden=tuple(int(h) for h in meta[3:]))
        params = {k: z[k].astype(np.float64) for k in z.files if k != "__config__"}
    model = SegModel(cfg, params)
    expected = init_model(cfg).params
    for k, p in expected.items():
        if k not in params or params[k].shape != p.shape:
            raise ValueError(f"checkpoint {path} is missing or misshapes {k}")
    model.reset_optimizer()
    return model
