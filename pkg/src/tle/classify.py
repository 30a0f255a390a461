"""Post-encoding normalization, the fully-connected encoder and the softmax head.

All array functions operate on the last axis and accept leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

__all__ = [
    "SQRT_EPS",
    "L2_EPS",
    "signed_sqrt",
    "signed_sqrt_grad",
    "l2_normalize",
    "l2_normalize_grad",
    "FcEncoder",
    "ClassifierHead",
    "softmax",
    "softmax_cross_entropy",
]

SQRT_EPS = 1e-6
L2_EPS = 1e-12


def signed_sqrt(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.sqrt(np.abs(y))


def signed_sqrt_grad(y, dz) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    # derivative is unbounded at 0; the clamp caps it at 1 / (2 * SQRT_EPS)
    return np.asarray(dz) / (2.0 * np.maximum(np.sqrt(np.abs(y)), SQRT_EPS))


def l2_normalize(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / np.maximum(norm, L2_EPS)


def l2_normalize_grad(z, dzn) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    dzn = np.asarray(dzn, dtype=np.float64)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    clamped = norm <= L2_EPS
    safe = np.maximum(norm, L2_EPS)
    u = z / safe
    proj = dzn - u * np.sum(u * dzn, axis=-1, keepdims=True)
    # below the clamp the map is z / eps, a plain scaling
    return np.where(clamped, dzn / L2_EPS, proj / safe)


@dataclass
class FcEncoder:
    """Affine map of the flattened ``h*w*c`` aggregated map to ``d_out`` features."""

    weight: np.ndarray  # d_out x (h*w*c)
    bias: np.ndarray  # d_out

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("FC encoder parameters must be finite")

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "FcEncoder":
        return cls(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in)), np.zeros(d_out))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def _flat(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        n = int(np.prod(X.shape[-3:]))
        if n != self.d_in:
            raise ShapeError(f"map has {n} values, encoder expects {self.d_in}")
        return X.reshape(X.shape[:-3] + (n,))

    def forward(self, X) -> np.ndarray:
        return self._flat(X) @ self.weight.T + self.bias

    def backward(self, X, dy):
        """Returns ``(dX, dweight, dbias)``; parameter grads are summed over batch axes."""
        X = np.asarray(X, dtype=np.float64)
        flat = self._flat(X)
        dy = np.asarray(dy, dtype=np.float64)
        dX = (dy @ self.weight).reshape(X.shape)
        dW = dy.reshape(-1, self.d_out).T @ flat.reshape(-1, self.d_in)
        db = dy.reshape(-1, self.d_out).sum(axis=0)
        return dX, dW, db


@dataclass
class ClassifierHead:
    weight: np.ndarray  # C x d
    bias: np.ndarray  # C

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if self.weight.shape[0] < 2:
            raise ValueError("a classifier needs at least two classes")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("classifier parameters must be finite")

    @classmethod
    def zeros(cls, n_classes: int, d: int) -> "ClassifierHead":
        return cls(np.zeros((n_classes, d)), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    def forward(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.d:
            raise ShapeError(f"feature length {z.shape[-1]} != classifier input dim {self.d}")
        return z @ self.weight.T + self.bias

    def backward(self, z, dlogits):
        """Returns ``(dz, dweight, dbias)``; parameter grads summed over batch axes."""
        z = np.asarray(z, dtype=np.float64)
        dlogits = np.asarray(dlogits, dtype=np.float64)
        dz = dlogits @ self.weight
        dW = dlogits.reshape(-1, self.n_classes).T @ z.reshape(-1, self.d)
        db = dlogits.reshape(-1, self.n_classes).sum(axis=0)
        return dz, dW, db


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Loss ``-log softmax(logits)[label]`` and its gradient w.r.t. the logits.

    ``label`` may be an int (single example) or an integer array matching the
    leading axes of ``logits``; the loss is then per example.
    """
    logits = np.asarray(logits, dtype=np.float64)
    C = logits.shape[-1]
    label = np.asarray(label)
    if not np.issubdtype(label.dtype, np.integer):
        raise TypeError("labels must be integers")
    if np.any(label < 0) or np.any(label >= C):
        raise ValueError(f"label out of range for {C} classes: {label}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, label[..., None], axis=-1)[..., 0]
    loss = lse - picked
    dlogits = softmax(logits)
    np.put_along_axis(dlogits, label[..., None], np.take_along_axis(dlogits, label[..., None], axis=-1) - 1.0,
                      axis=-1)
    if loss.ndim == 0:
        return float(loss), dlogits
    return loss, dlogits
