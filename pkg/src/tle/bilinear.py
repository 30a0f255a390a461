"""Full (uncompressed) bilinear pooling.

``y = vec(sum_l m_l m_l^T)`` where ``m_l`` is the channel vector at spatial
location ``l`` and ``vec`` concatenates columns.  Output dimension is c**2.
"""
from __future__ import annotations

import numpy as np

from .tensor import EncodedVector, FeatureMap, ShapeError, flatten_spatial, unflatten_spatial

__all__ = ["bilinear", "bilinear_grad", "bilinear_forward", "bilinear_backward", "bilinear_dim"]


def bilinear_dim(c: int) -> int:
    return c * c


def bilinear(X) -> np.ndarray:
    """Array version; trailing ``(h, w, c)`` axes, any leading batch axes."""
    M = flatten_spatial(X)
    gram = np.swapaxes(M, -1, -2) @ M
    c = M.shape[-1]
    # column concatenation: element (i, j) lands at j*c + i
    return np.swapaxes(gram, -1, -2).reshape(gram.shape[:-2] + (c * c,))


def bilinear_grad(X, dy) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    h, w, c = X.shape[-3:]
    if dy.shape[-1] != c * c:
        raise ShapeError(f"upstream gradient has length {dy.shape[-1]}, expected c^2 = {c * c}")
    G = np.swapaxes(dy.reshape(dy.shape[:-1] + (c, c)), -1, -2)
    S = G + np.swapaxes(G, -1, -2)
    dM = flatten_spatial(X) @ S
    return unflatten_spatial(dM, h, w)


def bilinear_forward(X: FeatureMap) -> EncodedVector:
    return EncodedVector(bilinear(X))


def bilinear_backward(X: FeatureMap, dy) -> FeatureMap:
    return FeatureMap(bilinear_grad(X, dy))
