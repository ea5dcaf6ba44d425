"""Spatial transforms with exact inverses, acting on the last two axes."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

KINDS = ("hflip", "vflip", "rot90", "rot180", "translate")


@dataclass(frozen=True)
class TransformKind:
    name: str
    dx: int = 0
    dy: int = 0

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown transform {self.name!r}; expected one of {', '.join(KINDS)}")
        if self.name != "translate" and (self.dx or self.dy):
            raise ValueError(f"{self.name} takes no offsets")

    @classmethod
    def parse(cls, text: str) -> "TransformKind":
        text = text.strip().lower()
        m = re.fullmatch(r"translate:\s*(-?\d+)\s*,\s*(-?\d+)", text)
        if m:
            return cls("translate", int(m.group(1)), int(m.group(2)))
        if text == "translate":
            raise ValueError("translate needs offsets, e.g. 'translate:4,0'")
        return cls(text)

    def __str__(self) -> str:
        if self.name == "translate":
            return f"translate:{self.dx},{self.dy}"
        return self.name


HFLIP = TransformKind("hflip")


def _check(kind: TransformKind, t: np.ndarray) -> None:
    if t.ndim < 2:
        raise ValueError("transforms need at least two spatial axes")
    if kind.name == "rot90" and t.shape[-1] != t.shape[-2]:
        raise ValueError(f"rot90 needs square spatial extents, got {t.shape[-2]}x{t.shape[-1]}")


def _move(kind: TransformKind, t: np.ndarray, inverse: bool) -> np.ndarray:
    _check(kind, t)
    if kind.name == "hflip":
        out = t[..., :, ::-1]
    elif kind.name == "vflip":
        out = t[..., ::-1, :]
    elif kind.name == "rot180":
        out = t[..., ::-1, ::-1]
    elif kind.name == "rot90":
        out = np.rot90(t, k=-1 if inverse else 1, axes=(-2, -1))
    else:
        sign = -1 if inverse else 1
        out = np.roll(t, shift=(sign * kind.dy, sign * kind.dx), axis=(-2, -1))
    return np.ascontiguousarray(out)


def apply(kind: TransformKind, t: np.ndarray) -> np.ndarray:
    """tau(t): a pure permutation of spatial positions. Translation wraps around."""
    return _move(kind, t, inverse=False)


def invert(kind: TransformKind, t: np.ndarray) -> np.ndarray:
    """tau^-1(t); ``invert(k, apply(k, t))`` reproduces ``t`` exactly."""
    return _move(kind, t, inverse=True)


def apply_to_labels(kind: TransformKind, labels: np.ndarray) -> np.ndarray:
    return _move(kind, labels, inverse=False)
