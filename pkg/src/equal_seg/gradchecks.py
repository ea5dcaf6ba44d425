"""Central-difference checks of every hand-written backward pass.

Each case builds a scalar loss from random inputs and compares the analytic
gradient of every input and parameter against central differences.
"""

from __future__ import annotations

import time
from typing import Callable, Dict, Iterable, List, Tuple

import numpy as np

from .model import ModelConfig, init_model
from .numerics import (
    IGNORE,
    conv2d,
    conv2d_backward,
    consistency_loss,
    gradcheck,
    masked_cross_entropy,
    relu,
    relu_backward,
    softmax_channel,
)
from .trainer import LossConfig, _batch_loss
from .transforms import TransformKind

KIND_CYCLE = ("hflip", "vflip", "rot90", "rot180", "translate:1,2")


def _targets(rng, n, c, h, w, ignore_frac=0.4):
    t = rng.integers(0, c, size=(n, h, w))
    t[rng.random((n, h, w)) < ignore_frac] = IGNORE
    t[:, 0, 0] = rng.integers(0, c, size=n)  # every image keeps at least one labeled pixel
    return t


def case_conv(rng) -> Tuple[Callable, dict]:
    n, cin, cout, h, w = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4)), 5, 4
    weights = rng.normal(size=(n, cout, h, w))

    def fn(p):
        out, cache = conv2d(p["x"], p["k"], p["b"])
        dx, dk, db = conv2d_backward(weights, cache)
        return float((weights * out).sum()), {"x": dx, "k": dk, "b": db}

    return fn, {"x": rng.normal(size=(n, cin, h, w)), "k": rng.normal(size=(cout, cin, 3, 3)),
                "b": rng.normal(size=cout)}


def case_relu(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    x = np.where(np.abs(x) < 0.05, 0.5, x)  # stay clear of the kink
    weights = rng.normal(size=x.shape)

    def fn(p):
        y, mask = relu(p["x"])
        return float((weights * y).sum()), {"x": relu_backward(weights, mask)}

    return fn, {"x": x}


def case_softmax_ce(rng):
    n, c, h, w = 2, int(rng.integers(2, 5)), 4, 3
    target = _targets(rng, n, c, h, w)

    def fn(p):
        loss, g = masked_cross_entropy(softmax_channel(p["z"]), target)
        return loss, {"z": g}

    return fn, {"z": 3.0 * rng.normal(size=(n, c, h, w))}


def _case_consistency(norm):
    def build(rng):
        a = rng.normal(size=(2, 3, 4, 4))
        b = a + rng.choice([-1.0, 1.0], size=a.shape) * rng.uniform(0.05, 1.0, size=a.shape)

        def fn(p):
            loss, g0, g1 = consistency_loss(p["i0"], p["i1"], norm)
            return loss, {"i0": g0, "i1": g1}

        return fn, {"i0": a, "i1": b}

    return build


def _case_model(pair_mask):
    def build(rng, seed):
        cfg = ModelConfig(in_channels=3, hidden=(4, 4), num_classes=3, seed=seed)
        model = init_model(cfg)
        n, size = len(pair_mask), 6
        x = rng.normal(size=(n, 3, size, size))
        target = _targets(rng, n, 3, size, size)
        kind = TransformKind.parse(KIND_CYCLE[seed % len(KIND_CYCLE)])
        loss_cfg = LossConfig(use_consistency=True, kind=kind, norm="l2")
        pair = np.array(pair_mask)

        def fn(p):
            model.params = p
            (total, _, _), grads = _batch_loss(model, x, target, pair, loss_cfg)
            return total, grads

        return fn, dict(model.params)

    return build


CASES: Dict[str, Callable] = {
    "conv2d": case_conv,
    "relu": case_relu,
    "softmax+masked_ce": case_softmax_ce,
    "consistency_l2": _case_consistency("l2"),
    "consistency_l1": _case_consistency("l1"),
}
MODEL_CASES: Dict[str, Callable] = {
    "model+ce": _case_model([False, False]),
    "model_pair+ce+sc": _case_model([True, True]),
    "model_mixed_batch": _case_model([True, False]),
}


def run_suite(seeds: Iterable[int] = range(10), h: float = 1e-5, tol: float = 1e-4) -> Dict[str, float]:
    """Worst relative error per op across all seeds."""
    worst: Dict[str, float] = {}
    for seed in seeds:
        for name, build in CASES.items():
            fn, params = build(np.random.default_rng([seed, 11]))
            err = gradcheck(fn, params, h=h, tol=tol).max_error
            worst[name] = max(worst.get(name, 0.0), err)
        for name, build in MODEL_CASES.items():
            fn, params = build(np.random.default_rng([seed, 13]), seed)
            err = gradcheck(fn, params, h=h, tol=tol).max_error
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def report(seeds: Iterable[int] = range(10), tol: float = 1e-4) -> Tuple[bool, List[str]]:
    seeds = list(seeds)
    t0 = time.perf_counter()
    worst = run_suite(seeds, tol=tol)
    lines = [f"{name:<20} max_rel_err={err:.3e}  {'ok' if err < tol else 'FAIL'}" for name, err in worst.items()]
    ok = all(err < tol for err in worst.values())
    lines.append(f"{len(seeds)} seeds, {time.perf_counter() - t0:.1f}s, tol {tol:g}: {'PASS' if ok else 'FAIL'}")
    return ok, lines
