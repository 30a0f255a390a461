"""Temporal aggregation of K segment feature maps into a single map.

The array-level functions take a stack whose axis 0 indexes segments, so
any trailing shape (including a batch axis after the segment axis) works.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import FeatureMap, ShapeError

__all__ = [
    "AggregationMode",
    "SegmentSet",
    "aggregate",
    "aggregate_grad",
    "aggregate_forward",
    "aggregate_backward",
    "leave_one_out_products",
]


class AggregationMode(str, enum.Enum):
    AVERAGE = "average"
    MAXIMUM = "maximum"
    PRODUCT = "product"

    @classmethod
    def parse(cls, value) -> "AggregationMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"avg": "average", "mean": "average", "max": "maximum",
                   "prod": "product", "mul": "product", "multiply": "product"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class SegmentSet:
    segments: tuple[FeatureMap, ...]

    def __post_init__(self):
        segs = tuple(s if isinstance(s, FeatureMap) else FeatureMap(s) for s in self.segments)
        if len(segs) < 2:
            raise ValueError(f"a segment set needs K >= 2 segments, got {len(segs)}")
        shape = segs[0].shape
        for k, s in enumerate(segs[1:], start=2):
            if s.shape != shape:
                raise ShapeError(f"segment {k} has shape {s.shape}, segment 1 has {shape}")
        object.__setattr__(self, "segments", segs)

    @property
    def K(self) -> int:
        return len(self.segments)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.segments[0].shape

    def stack(self) -> np.ndarray:
        return np.stack([s.values for s in self.segments])

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)


def leave_one_out_products(stack: np.ndarray) -> np.ndarray:
    """Products over all segments except k, for every k, without division.

    Prefix/suffix cumulative products make this exact at zeros.
    """
    K = stack.shape[0]
    ones = np.ones_like(stack[:1])
    prefix = np.concatenate([ones, np.cumprod(stack[:-1], axis=0)])
    suffix = np.concatenate([np.cumprod(stack[:0:-1], axis=0)[::-1], ones])
    out = prefix * suffix
    assert out.shape[0] == K
    return out


def aggregate(stack, mode) -> np.ndarray:
    mode = AggregationMode.parse(mode)
    stack = np.asarray(stack, dtype=np.float64)
    if mode is AggregationMode.AVERAGE:
        return stack.sum(axis=0) / stack.shape[0]
    if mode is AggregationMode.MAXIMUM:
        return stack.max(axis=0)
    return np.prod(stack, axis=0)


def aggregate_grad(stack, mode, dX) -> np.ndarray:
    """Gradient w.r.t. every segment; returns an array shaped like ``stack``."""
    mode = AggregationMode.parse(mode)
    stack = np.asarray(stack, dtype=np.float64)
    dX = np.asarray(dX, dtype=np.float64)
    if dX.shape != stack.shape[1:]:
        raise ShapeError(f"upstream gradient shape {dX.shape} != segment shape {stack.shape[1:]}")
    K = stack.shape[0]
    if mode is AggregationMode.AVERAGE:
        return np.broadcast_to(dX / K, stack.shape).copy()
    if mode is AggregationMode.MAXIMUM:
        # argmax picks the first maximum, so ties route to the lowest segment index
        winner = np.argmax(stack, axis=0)
        mask = np.arange(K).reshape((K,) + (1,) * dX.ndim) == winner
        return mask * dX
    return leave_one_out_products(stack) * dX


def _as_segment_set(s) -> SegmentSet:
    if isinstance(s, SegmentSet):
        return s
    return SegmentSet(tuple(s))


def aggregate_forward(s: SegmentSet | Sequence[FeatureMap], mode) -> FeatureMap:
    s = _as_segment_set(s)
    return FeatureMap(aggregate(s.stack(), mode))


def aggregate_backward(s: SegmentSet | Sequence[FeatureMap], mode, dX) -> list[FeatureMap]:
    s = _as_segment_set(s)
    grads = aggregate_grad(s.stack(), mode, np.asarray(dX, dtype=np.float64))
    return [FeatureMap(g) for g in grads]
