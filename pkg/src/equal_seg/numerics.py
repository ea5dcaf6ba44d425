"""Dense float64 layers, losses, the Adam update and a finite-difference gradient check.

Tensors are plain ``numpy.ndarray`` objects in float64. Every spatial op takes
either a single image ``[C, H, W]`` or a batch ``[N, C, H, W]``; image-level
losses are summed over the batch axis.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

IGNORE = 255


class ShapeError(ValueError):
    pass


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got extents {x.shape}")


# --------------------------------------------------------------------------
# conv2d (3x3, stride 1, zero padding 1)
# --------------------------------------------------------------------------


def _tap_offsets(width: int) -> list:
    wp = width + 2
    return [(dy - 1) * wp + (dx - 1) for dy in range(3) for dx in range(3)]


def _to_flat(x: np.ndarray, margin: int) -> np.ndarray:
    """``[N,C,H,W]`` -> ``[C, margin + N*(H+2)*(W+2) + margin]`` with a zero border.

    In this layout every 3x3 tap is a constant offset, so shifted copies are
    contiguous slices.
    """
    n, c, h, w = x.shape
    p = n * (h + 2) * (w + 2)
    buf = np.zeros((c, p + 2 * margin))
    buf[:, margin:margin + p].reshape(c, n, h + 2, w + 2)[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    return buf


def _interior(flat: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    c = flat.shape[0]
    return np.ascontiguousarray(flat.reshape(c, n, h + 2, w + 2)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))


def _gather(flat: np.ndarray, offsets: list, margin: int, p: int) -> np.ndarray:
    c = flat.shape[0]
    cols = np.empty((len(offsets), c, p))
    for t, off in enumerate(offsets):
        cols[t] = flat[:, margin + off:margin + off + p]
    return cols.reshape(len(offsets) * c, p)


@dataclass
class ConvCache:
    xflat: np.ndarray
    cols: Optional[np.ndarray]
    kernels: np.ndarray
    in_shape: Tuple[int, ...]
    single: bool


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, ConvCache]:
    """Same-size 3x3 cross-correlation.

    ``out[o, y, x] = bias[o] + sum_{c,dy,dx} in[c, y+dy-1, x+dx-1] * k[o, c, dy, dx]``
    with out-of-range input read as zero. Input taps are expanded when
    ``Cin <= Cout``; otherwise per-tap outputs are computed and shifted, which
    moves less memory for narrowing layers.
    """
    xb, single = _as_batch(np.asarray(x, dtype=np.float64))
    n, c, h, w = xb.shape
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"kernels must be [Cout,Cin,3,3], got {kernels.shape}")
    o = kernels.shape[0]
    if kernels.shape[1] != c:
        raise ShapeError(f"input has {c} channels but kernels expect {kernels.shape[1]}")
    if bias.shape != (o,):
        raise ShapeError(f"bias must be [{o}], got {bias.shape}")

    margin, p, offsets = w + 3, n * (h + 2) * (w + 2), _tap_offsets(w)
    xflat = _to_flat(xb, margin)
    if c <= o:
        cols = _gather(xflat, offsets, margin, p)
        acc = kernels.transpose(0, 2, 3, 1).reshape(o, 9 * c) @ cols
    else:
        cols = None
        per_tap = kernels.transpose(2, 3, 0, 1).reshape(9 * o, c) @ xflat
        acc = np.zeros((o, p))
        for t, off in enumerate(offsets):
            acc += per_tap[t * o:(t + 1) * o, margin + off:margin + off + p]
    out = _interior(acc, n, h, w)
    out += bias[None, :, None, None]
    cache = ConvCache(xflat, cols, kernels, xb.shape, single)
    return (out[0] if single else out), cache


def conv2d_backward(grad_out: np.ndarray, cache: ConvCache,
                    need_input: bool = True) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Returns gradients w.r.t. (input, kernels, bias); the input gradient is
    ``None`` when ``need_input`` is false."""
    n, c, h, w = cache.in_shape
    k = cache.kernels
    o = k.shape[0]
    g = grad_out[None] if cache.single else grad_out
    margin, p, offsets = w + 3, n * (h + 2) * (w + 2), _tap_offsets(w)
    d_bias = g.sum(axis=(0, 2, 3))
    gflat = _to_flat(g, margin)
    d_in = None
    if cache.cols is not None:
        d_k = (gflat[:, margin:margin + p] @ cache.cols.T).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
        if need_input:
            per_tap = k.transpose(2, 3, 1, 0).reshape(9 * c, o) @ gflat
            acc = np.zeros((c, p))
            for t, off in enumerate(offsets):
                acc += per_tap[t * c:(t + 1) * c, margin - off:margin - off + p]
            d_in = _interior(acc, n, h, w)
    else:
        gcols = _gather(gflat, [-off for off in offsets], margin, p)
        d_k = (gcols @ cache.xflat[:, margin:margin + p].T).reshape(3, 3, o, c).transpose(2, 3, 0, 1)
        if need_input:
            d_in = _interior(k.transpose(1, 2, 3, 0).reshape(c, 9 * o) @ gcols, n, h, w)
    if d_in is not None and cache.single:
        d_in = d_in[0]
    return d_in, np.ascontiguousarray(d_k), d_bias


# --------------------------------------------------------------------------
# elementwise / softmax
# --------------------------------------------------------------------------


def relu(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return np.maximum(x, 0.0), mask


def relu_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * mask


def softmax_channel(logits: np.ndarray) -> np.ndarray:
    """Softmax over the class axis (third from last), max-shifted for stability."""
    if logits.shape[-3] < 2:
        raise ShapeError("softmax needs at least two classes")
    shifted = logits - logits.max(axis=-3, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-3, keepdims=True)


def pixel_entropy(probs: np.ndarray) -> np.ndarray:
    """-sum_c p ln p per pixel, natural log, with 0 ln 0 := 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-3)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def masked_cross_entropy(
    probs: np.ndarray, target: np.ndarray, normalize: bool = True
) -> Tuple[float, np.ndarray]:
    """Cross-entropy over labeled pixels; ``target == IGNORE`` pixels are skipped.

    Returns the loss and its gradient with respect to the *logits* that produced
    ``probs`` (fused softmax + CE backward). With ``normalize`` each image is
    divided by its own labeled-pixel count; a batch sums the per-image losses.
    """
    pb, single = _as_batch(probs)
    tb = target[None] if single else target
    n, c, h, w = pb.shape
    if tb.shape != (n, h, w):
        raise ShapeError(f"target extents {target.shape} do not match probabilities {probs.shape}")
    labeled = tb != IGNORE
    if np.any(tb[labeled] >= c) or np.any(tb[labeled] < 0):
        raise ValueError(f"target class outside 0..{c - 1}")

    safe = np.where(labeled, tb, 0)
    picked = np.take_along_axis(pb, safe[:, None], axis=1)[:, 0]
    counts = labeled.reshape(n, -1).sum(axis=1)
    if normalize:
        scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    else:
        scale = np.ones(n)

    nll = np.where(labeled, -np.log(np.where(labeled, picked, 1.0)), 0.0)
    loss = float((nll.reshape(n, -1).sum(axis=1) * scale).sum())

    grad = pb.copy()
    np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
    grad *= labeled[:, None]
    grad *= scale[:, None, None, None]
    return loss, (grad[0] if single else grad)


def consistency_loss(
    i0: np.ndarray, i1: np.ndarray, norm: str = "l2"
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Self-consistency between two aligned logit maps.

    Per image: ``2 / (W*H*C) * sum (i0 - i1)^2`` (``norm="l2"``) or
    ``2 / (W*H*C) * sum |i0 - i1|`` (``norm="l1"``). Gradients go to both inputs.
    """
    if i0.shape != i1.shape:
        raise ShapeError(f"logit extents differ: {i0.shape} vs {i1.shape}")
    scale = 2.0 / float(np.prod(i0.shape[-3:]))
    diff = i0 - i1
    if norm == "l2":
        loss = scale * float(np.sum(diff * diff))
        g = 2.0 * scale * diff
    elif norm == "l1":
        loss = scale * float(np.sum(np.abs(diff)))
        g = scale * np.sign(diff)
    else:
        raise ValueError(f"unknown consistency norm {norm!r}")
    return loss, g, -g


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-4

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> Tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam with L2 weight decay folded into the gradient."""
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"extent mismatch: param {param.shape}, grad {grad.shape}, m {state.m.shape}, v {state.v.shape}"
        )
    if not np.all(np.isfinite(grad)):
        bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
        raise FloatingPointError(f"non-finite gradient ({bad} of {grad.size} entries)")
    g = grad + state.weight_decay * param if state.weight_decay else grad
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_param, dataclasses.replace(state, m=m, v=v, t=t)


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    errors: Dict[str, float]
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def gradcheck(
    fn: Callable[[Mapping[str, np.ndarray]], Tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    names: Optional[list] = None,
) -> GradcheckReport:
    """Compare analytic gradients against central differences.

    ``fn(params)`` returns ``(loss, grads)``. Each entry of every checked
    parameter is perturbed by ``+-h``; the per-parameter error is the max of
    ``|a - n| / max(1, |a|, |n|)``.
    """
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, analytic = fn(work)
    errors = {}
    for name in names or list(work):
        p = work[name]
        a = np.asarray(analytic[name])
        worst = 0.0
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up, _ = fn(work)
            flat[idx] = orig - h
            down, _ = fn(work)
            flat[idx] = orig
            num = (up - down) / (2.0 * h)
            ana = float(a.reshape(-1)[idx])
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
        errors[name] = worst
    return GradcheckReport(errors, tol)
