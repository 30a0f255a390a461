"""Central finite-difference checks for every analytic backward pass.

Each suite builds random instances, reduces the operation's output to a
scalar with a random projection, and compares the analytic gradient of that
scalar against central differences.  The FD side only ever calls forward
functions.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import aggregation as agg
from .bilinear import bilinear, bilinear_grad
from .classify import (ClassifierHead, FcEncoder, l2_normalize, l2_normalize_grad, signed_sqrt,
                       signed_sqrt_grad, softmax_cross_entropy)
from .data import FeatureDataset, VideoRecord, write_dataset
from .model import TleModel, TrainConfig, forward_backward
from .sketch import TensorSketchEncoder, sketch_matrix, tensor_sketch, tensor_sketch_grad

__all__ = [
    "DEFAULT_STEP",
    "NonFiniteError",
    "GradReport",
    "GradCase",
    "finite_diff",
    "compare",
    "check",
    "SUITES",
    "run_suites",
]

DEFAULT_STEP = 1e-5
REL_FLOOR = 1e-8


class NonFiniteError(FloatingPointError):
    def __init__(self, coord: int, value: float):
        super().__init__(f"objective is non-finite ({value}) when perturbing coordinate {coord}")
        self.coord = coord


def finite_diff(f: Callable[[np.ndarray], float], x, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at flat vector ``x``."""
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        fp = float(f(x))
        x[i] = orig - step
        fm = float(f(x))
        x[i] = orig
        if not np.isfinite(fp):
            raise NonFiniteError(i, fp)
        if not np.isfinite(fm):
            raise NonFiniteError(i, fm)
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


@dataclass
class GradReport:
    suite: str
    trial: int
    param: str
    analytic: np.ndarray
    numeric: np.ndarray
    abs_err: np.ndarray
    rel_err: np.ndarray
    tol: float

    @property
    def max_rel(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.tol

    def __str__(self):
        flag = "ok" if self.passed else "FAIL"
        return f"{self.suite}[{self.trial}].{self.param}: max rel err {self.max_rel:.2e} (tol {self.tol:g}) {flag}"


def compare(analytic, numeric, tol: float, suite: str = "", trial: int = 0, param: str = "x") -> GradReport:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    abs_err = np.abs(a - n)
    rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return GradReport(suite, trial, param, a, n, abs_err, rel, tol)


@dataclass
class GradCase:
    """One random instance: named inputs, a scalar objective and its analytic gradient."""

    inputs: dict[str, np.ndarray]
    objective: Callable[[dict[str, np.ndarray]], float]
    gradient: Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]]
    wrt: tuple[str, ...]


def _reports_for(case: GradCase, suite: str, trial: int, tol: float, step: float) -> list[GradReport]:
    analytic = case.gradient(case.inputs)
    out = []
    for name in case.wrt:
        base = case.inputs[name]

        def f(flat, name=name, base=base):
            trial_inputs = dict(case.inputs)
            trial_inputs[name] = flat.reshape(base.shape)
            return case.objective(trial_inputs)

        numeric = finite_diff(f, base, step)
        out.append(compare(analytic[name], numeric, tol, suite, trial, name))
    return out


def _write_replay(case: GradCase, suite: str, trial: int, replay_dir) -> str:
    videos = []
    for name, arr in case.inputs.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 3:
            frames = arr[None]
        elif arr.ndim == 4:
            frames = arr
        else:
            frames = arr.reshape(1, 1, 1, -1)
        videos.append(VideoRecord(name, 0, frames))
    os.makedirs(replay_dir, exist_ok=True)
    path = os.path.join(replay_dir, f"{suite}_trial{trial}.tlef")
    write_dataset(FeatureDataset(1, videos, split="test"), path)
    return path


def check(make_case: Callable[[np.random.Generator], GradCase], tol: float, trials: int = 50,
          seed: int = 0, suite: str = "case", step: float = DEFAULT_STEP,
          replay_dir=None) -> Iterator[GradReport]:
    """Yield reports trial by trial; stop after the first failing trial.

    With ``replay_dir`` set, the failing instance's inputs are written there
    as a TLEF dataset (one "video" per input array).
    """
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        case = make_case(rng)
        reports = _reports_for(case, suite, trial, tol, step)
        yield from reports
        if not all(r.passed for r in reports):
            if replay_dir is not None:
                _write_replay(case, suite, trial, replay_dir)
            return


# --- instance generators -------------------------------------------------

def _projected(fn, inputs, R):
    """Objective ``<R, fn(inputs)>`` shifted by its value at ``inputs``.

    The constant shift leaves the gradient alone, but entries the perturbed
    coordinate does not touch now cancel exactly, so the central difference
    is not swamped by rounding of the full sum.
    """
    base = fn(inputs)
    return lambda d: math.fsum((R * (fn(d) - base)).ravel())


def _signed_uniform(rng, size, lo=0.5, hi=2.0):
    # magnitudes bounded away from zero keep every gradient coordinate well
    # above the relative-error floor
    return rng.choice([-1.0, 1.0], size=size) * rng.uniform(lo, hi, size=size)


def _shape(rng, max_hw=3, max_c=5):
    return (int(rng.integers(1, max_hw + 1)), int(rng.integers(1, max_hw + 1)), int(rng.integers(1, max_c + 1)))


def _unique_max_stack(rng, K, shape, margin):
    """Segments whose per-element maximum beats the runner-up by ``margin``."""
    stack = rng.normal(size=(K,) + shape)
    top = np.argmax(stack, axis=0)
    second = np.sort(stack, axis=0)[-2]
    lift = np.maximum(second + margin - stack.max(axis=0), 0.0)
    np.put_along_axis(stack, top[None], np.take_along_axis(stack, top[None], 0) + lift, axis=0)
    return stack


def aggregation_case(mode: str, zeros: bool = False):
    def make(rng):
        K = int(rng.integers(2, 5))
        shape = _shape(rng)
        if mode == "maximum":
            stack = _unique_max_stack(rng, K, shape, margin=1e-3)
        else:
            stack = _signed_uniform(rng, (K,) + shape)
            if zeros:
                stack[rng.random(stack.shape) < 0.2] = 0.0
        R = _signed_uniform(rng, shape)
        inputs = {"segments": stack}
        return GradCase(
            inputs,
            _projected(lambda d: agg.aggregate(d["segments"], mode), inputs, R),
            lambda d: {"segments": agg.aggregate_grad(d["segments"], mode, R)},
            ("segments",))
    return make


def bilinear_case(rng):
    X = rng.normal(size=_shape(rng, 3, 4))
    R = rng.normal(size=X.shape[-1] ** 2)
    inputs = {"X": X}
    return GradCase(inputs, _projected(lambda d: bilinear(d["X"]), inputs, R),
                    lambda d: {"X": bilinear_grad(d["X"], R)}, ("X",))


def tensor_sketch_case(rng):
    X = rng.normal(size=_shape(rng, 2, 6))
    d = int(rng.choice([5, 8, 13, 16]))
    enc = TensorSketchEncoder.create(X.shape[-1], d, int(rng.integers(2 ** 63)))
    R = rng.normal(size=d)
    inputs = {"X": X}
    return GradCase(inputs, _projected(lambda v: tensor_sketch(v["X"], enc), inputs, R),
                    lambda v: {"X": tensor_sketch_grad(v["X"], enc, R)}, ("X",))


def signed_sqrt_case(rng):
    n = int(rng.integers(1, 20))
    y = rng.choice([-1.0, 1.0], size=n) * rng.uniform(0.1, 4.0, size=n)
    R = rng.normal(size=n)
    inputs = {"y": y}
    return GradCase(inputs, _projected(lambda d: signed_sqrt(d["y"]), inputs, R),
                    lambda d: {"y": signed_sqrt_grad(d["y"], R)}, ("y",))


def l2_case(rng):
    n = int(rng.integers(1, 20))
    z = rng.normal(size=n)
    z *= rng.uniform(0.5, 5.0) / max(np.linalg.norm(z), 1e-3)
    R = rng.normal(size=n)
    inputs = {"z": z}
    return GradCase(inputs, _projected(lambda d: l2_normalize(d["z"]), inputs, R),
                    lambda d: {"z": l2_normalize_grad(d["z"], R)}, ("z",))


def fc_case(rng):
    shape = _shape(rng, 2, 4)
    d_in, d_out = int(np.prod(shape)), int(rng.integers(1, 7))
    X = rng.normal(size=shape)
    W = rng.normal(size=(d_out, d_in))
    b = rng.normal(size=d_out)
    R = rng.normal(size=d_out)

    def grad(d):
        dX, dW, db = FcEncoder(d["weight"], d["bias"]).backward(d["X"], R)
        return {"X": dX, "weight": dW, "bias": db}

    inputs = {"X": X, "weight": W, "bias": b}
    return GradCase(inputs, _projected(lambda d: FcEncoder(d["weight"], d["bias"]).forward(d["X"]), inputs, R),
                    grad, ("X", "weight", "bias"))


def classifier_case(rng):
    C, d = int(rng.integers(2, 6)), int(rng.integers(1, 10))
    z = _signed_uniform(rng, d)
    W = rng.normal(scale=0.5, size=(C, d))
    b = rng.normal(scale=0.5, size=C)
    label = int(rng.integers(C))

    def loss(v):
        return softmax_cross_entropy(ClassifierHead(v["weight"], v["bias"]).forward(v["z"]), label)[0]

    def grad(v):
        head = ClassifierHead(v["weight"], v["bias"])
        _, dlogits = softmax_cross_entropy(head.forward(v["z"]), label)
        dz, dW, db = head.backward(v["z"], dlogits)
        return {"z": dz, "weight": dW, "bias": db}

    return GradCase({"z": z, "weight": W, "bias": b}, loss, grad, ("z", "weight", "bias"))


def softmax_case(rng):
    C = int(rng.integers(2, 8))
    logits = rng.normal(scale=1.0, size=C)
    label = int(rng.integers(C))
    return GradCase({"logits": logits}, lambda d: softmax_cross_entropy(d["logits"], label)[0],
                    lambda d: {"logits": softmax_cross_entropy(d["logits"], label)[1]}, ("logits",))


def pipeline_case(encoder: str):
    """Whole chain for a small batch; inputs are the segments and every parameter."""

    def make(rng):
        while True:
            K = int(rng.integers(2, 4))
            mode = str(rng.choice(["average", "maximum", "product"]))
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(3, 7)))
            B, C = 2, int(rng.integers(2, 5))
            d = int(rng.integers(4, 17))
            if encoder == "tensor_sketch":
                # keep every output bucket reachable so none sits at sqrt's kink
                d = int(rng.integers(4, 9))
            cfg = TrainConfig(K=K, aggregation=mode, encoder=encoder, sketch_dim=d, fc_dim=d,
                              seed=int(rng.integers(2 ** 31)))
            model = TleModel.init(cfg, C, shape)
            model.head.weight[...] = rng.normal(scale=0.3, size=model.head.weight.shape)
            model.head.bias[...] = rng.normal(scale=0.3, size=C)
            if mode == "maximum":
                stack = _unique_max_stack(rng, K, (B,) + shape, margin=1e-3)
            else:
                stack = _signed_uniform(rng, (K, B) + shape)
            labels = rng.integers(C, size=B)
            if model.normalizes and not _away_from_kink(model, stack):
                continue
            break

        def bind(v):
            model.head.weight[...] = v["W"]
            model.head.bias[...] = v["b"]
            if model.fc is not None:
                model.fc.weight[...] = v["fc_W"]
                model.fc.bias[...] = v["fc_b"]

        def loss(v):
            bind(v)
            return forward_backward(model, v["segments"], labels)[0]

        def grad(v):
            bind(v)
            _, _, grads, dstack = forward_backward(model, v["segments"], labels, input_grad=True)
            return {"segments": dstack, **grads}

        inputs = {"segments": stack, **{k: p.copy() for k, p in model.params().items()}}
        return GradCase(inputs, loss, grad, tuple(inputs))
    return make


def _away_from_kink(model: TleModel, stack) -> bool:
    if model.config.encoder == "tensor_sketch" and not np.all(np.any(sketch_matrix(model.sketch) != 0, axis=1)):
        # an unreachable bucket outputs pure FFT roundoff, right at the kink
        return False
    y = model.encode(agg.aggregate(stack, model.config.aggregation))
    return bool(np.all(np.abs(y) > 0.1))


SUITES: dict[str, tuple[Callable, float]] = {
    "aggregate_average": (aggregation_case("average"), 1e-6),
    "aggregate_maximum": (aggregation_case("maximum"), 1e-6),
    "aggregate_product": (aggregation_case("product"), 1e-6),
    "aggregate_product_zeros": (aggregation_case("product", zeros=True), 1e-6),
    "bilinear": (bilinear_case, 1e-6),
    "tensor_sketch": (tensor_sketch_case, 1e-5),
    "signed_sqrt": (signed_sqrt_case, 1e-6),
    "l2_normalize": (l2_case, 1e-6),
    "fc_encoder": (fc_case, 1e-6),
    "classifier": (classifier_case, 1e-6),
    "softmax_cross_entropy": (softmax_case, 1e-6),
    "pipeline_bilinear": (pipeline_case("bilinear"), 1e-4),
    "pipeline_tensor_sketch": (pipeline_case("tensor_sketch"), 1e-4),
    "pipeline_fc": (pipeline_case("fc"), 1e-4),
}


def run_suites(names=None, trials: int = 50, seed: int = 0, replay_dir=None) -> dict[str, list[GradReport]]:
    names = list(SUITES) if names is None else list(names)
    out = {}
    for name in names:
        make, tol = SUITES[name]
        out[name] = list(check(make, tol, trials, seed, name, replay_dir=replay_dir))
    return out
