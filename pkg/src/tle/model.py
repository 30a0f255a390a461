"""The TLE model: configuration, parameters, and the forward/backward pipeline.

Pipeline per video: K segment maps -> temporal aggregation -> encoder
(bilinear, tensor sketch or fully connected) -> signed sqrt + L2 (bilinear
encoders only) -> linear softmax head.  All K segments go through the same
parameters; the segment axis only exists in the input stack.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregationMode, SegmentSet, aggregate, aggregate_grad
from .bilinear import bilinear, bilinear_grad
from .classify import (ClassifierHead, FcEncoder, l2_normalize, l2_normalize_grad, signed_sqrt,
                       signed_sqrt_grad, softmax, softmax_cross_entropy)
from .sketch import TensorSketchEncoder, tensor_sketch, tensor_sketch_grad
from .tensor import ShapeError

__all__ = [
    "ENCODERS",
    "TrainConfig",
    "TleModel",
    "forward_backward",
    "forward_video",
    "batch_logits",
    "sgd_step",
]

ENCODERS = ("bilinear", "tensor_sketch", "fc")
# normalized encoders feed unit-norm features to the head and tolerate a
# large step; the raw FC path diverges there in the fine-tuning phase
DEFAULT_LR = {"bilinear": 1.0, "tensor_sketch": 1.0, "fc": 0.01}


@dataclass
class TrainConfig:
    K: int = 3
    aggregation: str = "product"
    encoder: str = "tensor_sketch"
    sketch_dim: int = 8196
    fc_dim: int = 64
    lr: float | None = None  # None picks DEFAULT_LR for the encoder
    lr_decay: float = 0.1
    lr_step: int = 400
    max_iters: int = 1200
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 15
    seed: int = 0
    two_step: bool = True
    test_groups: int = 3
    eval_every: int = 1

    def __post_init__(self):
        self.aggregation = AggregationMode.parse(self.aggregation).value
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.encoder]
        for name in ("K", "sketch_dim", "fc_dim", "lr_step", "batch_size", "test_groups", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.max_iters < 0 or self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("max_iters, lr, momentum and weight_decay must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")

    @property
    def n_phases(self) -> int:
        # the head-then-everything schedule only matters when something besides
        # the head is trainable
        return 2 if (self.encoder == "fc" and self.two_step) else 1

    @property
    def total_iters(self) -> int:
        return self.max_iters * self.n_phases

    def lr_at(self, iteration: int) -> float:
        local = iteration % self.max_iters if self.max_iters else 0
        return self.lr * self.lr_decay ** (local // self.lr_step)

    def phase_at(self, iteration: int) -> str:
        if self.n_phases == 1:
            return "full"
        return "head" if iteration < self.max_iters else "full"

    # key=value text form
    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]

    @classmethod
    def from_mapping(cls, values: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = dataclasses.asdict(base) if base is not None else {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = _coerce(types[key], raw)
        return cls(**kw)

    @classmethod
    def parse(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_mapping(cls.parse_mapping(text), base)

    @staticmethod
    def parse_mapping(text: str) -> dict[str, str]:
        """Raw ``key=value`` pairs of a config file (``#`` starts a comment)."""
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        return values


def _coerce(type_name, raw):
    if not isinstance(raw, str):
        return raw
    if isinstance(type_name, str) and type_name.endswith(" | None"):
        if raw.lower() in ("", "none"):
            return None
        type_name = type_name[:-len(" | None")]
    if type_name in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name in ("int", int):
        return int(raw)
    if type_name in ("float", float):
        return float(raw)
    return raw


@dataclass(eq=False)
class TleModel:
    config: TrainConfig
    n_classes: int
    map_shape: tuple[int, int, int]
    head: ClassifierHead
    sketch: TensorSketchEncoder | None = None
    fc: FcEncoder | None = None
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self):
        self.map_shape = tuple(int(x) for x in self.map_shape)
        if self.head.n_classes != self.n_classes:
            raise ShapeError(f"head has {self.head.n_classes} classes, model declares {self.n_classes}")
        if self.head.d != self.feature_dim:
            raise ShapeError(f"encoder emits {self.feature_dim} features, head expects {self.head.d}")
        if self.config.encoder == "tensor_sketch" and (self.sketch is None or self.sketch.c != self.map_shape[2]):
            raise ShapeError("tensor-sketch model needs a sketch matching the channel count")
        if self.config.encoder == "fc" and (self.fc is None or self.fc.d_in != int(np.prod(self.map_shape))):
            raise ShapeError("fc model needs an encoder matching h*w*c")
        for name, p in self.params().items():
            buf = self.buffers.setdefault(name, np.zeros_like(p))
            if buf.shape != p.shape:
                raise ShapeError(f"momentum buffer {name!r} has shape {buf.shape}, parameter {p.shape}")

    @classmethod
    def init(cls, config: TrainConfig, n_classes: int, map_shape) -> "TleModel":
        h, w, c = map_shape
        sketch = fc = None
        if config.encoder == "tensor_sketch":
            sketch = TensorSketchEncoder.create(c, config.sketch_dim, config.seed)
            d = config.sketch_dim
        elif config.encoder == "fc":
            fc = FcEncoder.init(h * w * c, config.fc_dim, np.random.default_rng([config.seed, 7]))
            d = config.fc_dim
        else:
            d = c * c
        # a zero head is a valid start for a convex softmax layer and makes
        # the untrained model predict uniformly
        return cls(config, n_classes, (h, w, c), ClassifierHead.zeros(n_classes, d), sketch, fc)

    @property
    def feature_dim(self) -> int:
        enc = self.config.encoder
        if enc == "tensor_sketch":
            return self.sketch.d if self.sketch is not None else self.config.sketch_dim
        if enc == "fc":
            return self.fc.d_out if self.fc is not None else self.config.fc_dim
        return self.map_shape[2] ** 2

    @property
    def normalizes(self) -> bool:
        return self.config.encoder in ("bilinear", "tensor_sketch")

    def params(self) -> dict[str, np.ndarray]:
        out = {"W": self.head.weight, "b": self.head.bias}
        if self.fc is not None:
            out["fc_W"] = self.fc.weight
            out["fc_b"] = self.fc.bias
        return out

    def trainable(self, phase: str) -> tuple[str, ...]:
        if phase == "head":
            return ("W", "b")
        return tuple(self.params())

    def encode(self, X) -> np.ndarray:
        enc = self.config.encoder
        if enc == "tensor_sketch":
            return tensor_sketch(X, self.sketch)
        if enc == "fc":
            return self.fc.forward(X)
        return bilinear(X)

    def check_input(self, stack: np.ndarray) -> None:
        if stack.ndim < 4 or stack.shape[-3:] != self.map_shape:
            raise ShapeError(f"segment maps have shape {stack.shape[-3:]}, model expects {self.map_shape}")
        if stack.shape[0] != self.config.K:
            raise ShapeError(f"got {stack.shape[0]} segments, model uses K={self.config.K}")


def forward_backward(model: TleModel, stack, labels, input_grad: bool = False):
    """Mean loss over a batch plus gradients.

    ``stack`` has shape ``(K, B, h, w, c)``.  Returns ``(loss, logits, grads,
    dstack)`` where ``grads`` maps parameter names to mean-over-batch
    gradients and ``dstack`` (only with ``input_grad``) is the gradient of the
    mean loss w.r.t. every segment map.
    """
    stack = np.asarray(stack, dtype=np.float64)
    model.check_input(stack)
    labels = np.asarray(labels, dtype=np.int64)
    B = stack.shape[1]
    mode = model.config.aggregation

    X = aggregate(stack, mode)
    y = model.encode(X)
    if model.normalizes:
        z = signed_sqrt(y)
        feat = l2_normalize(z)
    else:
        feat = y
    logits = model.head.forward(feat)
    losses, dlogits = softmax_cross_entropy(logits, labels)
    dlogits = dlogits / B

    grads = {}
    dfeat, grads["W"], grads["b"] = model.head.backward(feat, dlogits)
    need_encoder_grad = model.fc is not None or input_grad
    dstack = None
    if need_encoder_grad:
        dy = signed_sqrt_grad(y, l2_normalize_grad(z, dfeat)) if model.normalizes else dfeat
        enc = model.config.encoder
        if enc == "fc":
            dX, grads["fc_W"], grads["fc_b"] = model.fc.backward(X, dy)
        elif enc == "tensor_sketch":
            dX = tensor_sketch_grad(X, model.sketch, dy) if input_grad else None
        else:
            dX = bilinear_grad(X, dy) if input_grad else None
        if input_grad:
            dstack = aggregate_grad(stack, mode, dX)
    return float(np.mean(losses)), logits, grads, dstack


def batch_logits(model: TleModel, stack) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    model.check_input(stack)
    y = model.encode(aggregate(stack, model.config.aggregation))
    if model.normalizes:
        y = l2_normalize(signed_sqrt(y))
    return model.head.forward(y)


def forward_video(model: TleModel, s: SegmentSet, label: int | None = None):
    """Loss and logits of one video's segment set.

    Without a label the loss is reported as ``nan``.
    """
    stack = s.stack()[:, None] if isinstance(s, SegmentSet) else np.asarray(s, dtype=np.float64)[:, None]
    logits = batch_logits(model, stack)[0]
    if label is None:
        return float("nan"), logits
    loss, _ = softmax_cross_entropy(logits, int(label))
    return loss, logits


def predict_proba(model: TleModel, s: SegmentSet) -> np.ndarray:
    return softmax(forward_video(model, s)[1])


def sgd_step(model: TleModel, grads: dict[str, np.ndarray], lr: float) -> TleModel:
    """Momentum SGD with L2 weight decay, in place.

    ``buf <- momentum * buf + grad + weight_decay * param``;
    ``param <- param - lr * buf``.  Only parameters named in ``grads`` move.
    """
    params = model.params()
    mom, wd = model.config.momentum, model.config.weight_decay
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"unknown parameter {name!r}")
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        buf = model.buffers[name]
        buf[...] = mom * buf + g + wd * p
        p -= lr * buf
    return model
