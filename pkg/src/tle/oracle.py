"""Dataset-quality oracle: logistic regression on exact bilinear features.

This deliberately shares no code with the training path.  It aggregates
the test-mode segments with plain numpy, forms the Gram matrix over
locations, applies signed sqrt and L2 normalization, and fits
scikit-learn's multinomial logistic regression.  If this cannot separate a
dataset, a TLE model failing on it says nothing about the model.
"""
from __future__ import annotations

import numpy as np
from sklearn.linear_model import LogisticRegression

__all__ = ["exact_bilinear_features", "logistic_oracle"]


def _centre_indices(n: int, K: int) -> list[int]:
    base, rem = divmod(n, K)
    out, start = [], 0
    for k in range(K):
        size = base + (k < rem)
        out.append(start + (size - 1) // 2)
        start += size
    return out


def exact_bilinear_features(ds, K: int = 3, aggregation: str = "product") -> np.ndarray:
    reduce = {"product": np.prod, "average": np.mean, "maximum": np.max}[aggregation]
    rows = []
    for v in ds.videos:
        X = reduce(v.frames[_centre_indices(v.n_maps, K)], axis=0)
        M = X.reshape(-1, X.shape[-1])
        y = np.einsum("li,lj->ij", M, M).ravel()
        z = np.sign(y) * np.sqrt(np.abs(y))
        n = np.linalg.norm(z)
        rows.append(z / n if n > 0 else z)
    return np.array(rows)


def logistic_oracle(train_ds, test_ds=None, K: int = 3, aggregation: str = "product",
                    C: float = 100.0) -> dict:
    """Train/test accuracy of logistic regression on exact bilinear features."""
    Ftr = exact_bilinear_features(train_ds, K, aggregation)
    clf = LogisticRegression(C=C, max_iter=5000)
    clf.fit(Ftr, train_ds.labels)
    out = {"train": float(clf.score(Ftr, train_ds.labels))}
    if test_ds is not None:
        out["test"] = float(clf.score(exact_bilinear_features(test_ds, K, aggregation), test_ds.labels))
    return out
