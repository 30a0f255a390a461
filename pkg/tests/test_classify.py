import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tle.classify import (SQRT_EPS, ClassifierHead, FcEncoder, l2_normalize, l2_normalize_grad, signed_sqrt,
                          signed_sqrt_grad, softmax_cross_entropy)
from tle.gradcheck import finite_diff


def rel_err(a, n):
    a, n = np.ravel(a), np.ravel(n)
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8))


def test_signed_sqrt_values():
    np.testing.assert_array_equal(signed_sqrt([4.0, -9.0, 0.0]), [2.0, -3.0, 0.0])


def test_signed_sqrt_backward_value():
    assert signed_sqrt_grad([4.0], [1.0])[0] == 0.25


def test_signed_sqrt_backward_clamped_at_zero():
    assert signed_sqrt_grad([0.0], [1.0])[0] == pytest.approx(1 / (2 * SQRT_EPS))


def test_signed_sqrt_fd(rng):
    y = rng.choice([-1, 1], 12) * rng.uniform(0.1, 5, 12)
    R = rng.normal(size=12)
    numeric = finite_diff(lambda v: float(R @ signed_sqrt(v)), y)
    assert rel_err(signed_sqrt_grad(y, R), numeric) <= 1e-6


def test_l2_values():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], rtol=1e-15)
    np.testing.assert_array_equal(l2_normalize(np.zeros(4)), np.zeros(4))
    np.testing.assert_array_equal(l2_normalize_grad(np.zeros(3), np.ones(3)), np.full(3, 1e12))


def test_l2_unit_norm_and_fd(rng):
    z = rng.normal(size=9)
    assert np.linalg.norm(l2_normalize(z)) == pytest.approx(1.0, abs=1e-12)
    R = rng.normal(size=9)
    numeric = finite_diff(lambda v: float(R @ l2_normalize(v)), z)
    assert rel_err(l2_normalize_grad(z, R), numeric) <= 1e-6


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-1e3, 1e3)).filter(
    lambda z: np.linalg.norm(z) > 1e-3), st.floats(1e-3, 1e3))
def test_l2_scale_invariant(z, alpha):
    np.testing.assert_allclose(l2_normalize(alpha * z), l2_normalize(z), rtol=1e-12, atol=1e-12)


def test_fc_zero_weights_gives_bias(rng):
    enc = FcEncoder(np.zeros((3, 8)), np.array([1.0, -2.0, 0.5]))
    np.testing.assert_array_equal(enc.forward(rng.normal(size=(2, 2, 2))), [1.0, -2.0, 0.5])


def test_fc_identity(rng):
    X = rng.normal(size=(2, 1, 3))
    enc = FcEncoder(np.eye(6), np.zeros(6))
    np.testing.assert_array_equal(enc.forward(X), X.ravel())


def test_fc_gradients_fd(rng):
    X = rng.normal(size=(2, 1, 3))
    W, b = rng.normal(size=(4, 6)), rng.normal(size=4)
    R = rng.normal(size=4)
    dX, dW, db = FcEncoder(W, b).backward(X, R)
    assert rel_err(dX, finite_diff(lambda x: float(R @ FcEncoder(W, b).forward(x.reshape(X.shape))), X)) <= 1e-6
    assert rel_err(dW, finite_diff(lambda w: float(R @ FcEncoder(w.reshape(W.shape), b).forward(X)), W)) <= 1e-6
    assert rel_err(db, finite_diff(lambda v: float(R @ FcEncoder(W, v).forward(X)), b)) <= 1e-6


def test_fc_dim_mismatch():
    with pytest.raises(ValueError):
        FcEncoder(np.zeros((2, 5)), np.zeros(2)).forward(np.zeros((1, 1, 4)))


def test_softmax_uniform():
    loss, d = softmax_cross_entropy(np.zeros(2), 0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(d, [-0.5, 0.5])


def test_softmax_stable():
    loss, d = softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-300) and np.all(np.isfinite(d))
    loss, _ = softmax_cross_entropy(np.array([1000.0, 0.0]), 1)
    assert loss == pytest.approx(1000.0)


def test_softmax_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), -1)


@pytest.mark.parametrize("seed", range(10))
def test_softmax_fd_and_simplex(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=5)
    label = int(rng.integers(5))
    loss, d = softmax_cross_entropy(logits, label)
    numeric = finite_diff(lambda v: softmax_cross_entropy(v, label)[0], logits)
    assert rel_err(d, numeric) <= 1e-6
    assert abs(d.sum()) <= 1e-12


def test_softmax_batch(rng):
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 1])
    loss, d = softmax_cross_entropy(logits, labels)
    for i in range(4):
        li, di = softmax_cross_entropy(logits[i], int(labels[i]))
        assert loss[i] == pytest.approx(li, rel=1e-14)
        np.testing.assert_allclose(d[i], di, rtol=1e-14)


def test_head_validation():
    with pytest.raises(ValueError):
        ClassifierHead(np.zeros((1, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        ClassifierHead(np.full((2, 3), np.nan), np.zeros(2))
    with pytest.raises(ValueError):
        ClassifierHead(np.zeros((2, 3)), np.zeros(2)).forward(np.zeros(4))
