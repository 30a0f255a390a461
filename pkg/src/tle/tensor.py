"""Dense feature-map containers.

A feature map is an ``h x w x c`` block stored location-major, i.e. the flat
index of ``(row, col, ch)`` is ``((row * w) + col) * c + ch``.  That is plain
C order for an ``(h, w, c)`` numpy array, so reshaping to the
``(h*w) x c`` location matrix is a view.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FeatureMap",
    "EncodedVector",
    "ShapeError",
    "flatten_spatial",
    "unflatten_spatial",
    "elementwise",
]


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


def _frozen(values, dtype=np.float64):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """One segment's convolutional feature block."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.values)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"feature map must be a non-empty h x w x c block, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_flat(cls, h: int, w: int, c: int, flat) -> "FeatureMap":
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != h * w * c:
            raise ShapeError(f"expected {h * w * c} values for {h}x{w}x{c}, got {flat.size}")
        return cls(flat.reshape(h, w, c))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def c(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def __getitem__(self, idx):
        return self.values[idx]

    def __array__(self, dtype=None, copy=None):
        if dtype is None or np.dtype(dtype) == self.values.dtype:
            return self.values.copy() if copy else self.values
        return self.values.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"FeatureMap(h={self.h}, w={self.w}, c={self.c})"


@dataclass(frozen=True, eq=False)
class EncodedVector:
    """A d-dimensional encoding of one aggregated map."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.values)
        if arr.ndim != 1 or arr.size < 1:
            raise ShapeError(f"encoded vector must be 1-D and non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("encoded vector contains non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def d(self) -> int:
        return self.values.size

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        if dtype is None or np.dtype(dtype) == self.values.dtype:
            return self.values.copy() if copy else self.values
        return self.values.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, EncodedVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"EncodedVector(d={self.d})"


def flatten_spatial(m) -> np.ndarray:
    """Return the ``(h*w) x c`` location matrix of ``m``.

    Row ``l`` is the channel vector at spatial location ``l``. Accepts a
    FeatureMap or any array with trailing ``(h, w, c)`` axes; leading axes
    are kept as batch axes.
    """
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim < 3:
        raise ShapeError(f"need trailing (h, w, c) axes, got shape {arr.shape}")
    h, w, c = arr.shape[-3:]
    return arr.reshape(arr.shape[:-3] + (h * w, c))


def unflatten_spatial(mat, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`flatten_spatial`."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape[-2] != h * w:
        raise ShapeError(f"location axis has {mat.shape[-2]} rows, expected {h}*{w}")
    return mat.reshape(mat.shape[:-2] + (h, w, mat.shape[-1]))


_OPS = {"add": np.add, "mul": np.multiply, "max": np.maximum}


def elementwise(a, b, op: str) -> FeatureMap:
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}")
    a_arr, b_arr = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a_arr.shape != b_arr.shape:
        raise ShapeError(f"shape mismatch: {a_arr.shape} vs {b_arr.shape}")
    return FeatureMap(_OPS[op](a_arr, b_arr))
