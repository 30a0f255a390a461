"""Segment sampling, the SGD training loop, video-level prediction and late fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .aggregation import SegmentSet
from .classify import softmax
from .data import FeatureDataset, VideoRecord, synth_dataset
from .model import TleModel, TrainConfig, batch_logits, forward_backward, sgd_step
from .tensor import ShapeError

__all__ = [
    "part_bounds",
    "segment_indices",
    "group_indices",
    "sample_segments",
    "MetricsLog",
    "train",
    "predict_video",
    "predict_dataset",
    "evaluate",
    "fuse_streams",
    "compare_aggregations",
]


def part_bounds(n: int, K: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into K contiguous parts; the first ``n % K`` get one extra."""
    if n < K:
        raise ValueError(f"need at least K={K} maps, video has {n}")
    base, rem = divmod(n, K)
    bounds, start = [], 0
    for k in range(K):
        size = base + (1 if k < rem else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def segment_indices(n: int, K: int, mode: str = "test", rng: np.random.Generator | None = None) -> list[int]:
    """One map index per part: uniform random in train mode, the centre in test mode."""
    bounds = part_bounds(n, K)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode sampling needs a random generator")
        return [int(rng.integers(lo, hi)) for lo, hi in bounds]
    if mode == "test":
        return [(lo + hi - 1) // 2 for lo, hi in bounds]
    raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")


def group_indices(n: int, K: int, groups: int) -> list[list[int]]:
    """``groups`` deterministic segment sets spread evenly inside each part.

    With one group this is the test-mode centre rule.
    """
    if groups < 1:
        raise ValueError("groups must be positive")
    bounds = part_bounds(n, K)
    if min(hi - lo for lo, hi in bounds) < groups:
        raise ValueError(f"{n} maps split into {K} parts cannot supply {groups} groups")
    out = []
    for g in range(groups):
        # centre of the g-th of `groups` equal slices of each part
        out.append([lo + ((2 * g + 1) * (hi - lo) - groups) // (2 * groups) for lo, hi in bounds])
    return out


def sample_segments(v: VideoRecord, K: int, mode: str = "test",
                    rng: np.random.Generator | None = None) -> SegmentSet:
    idx = segment_indices(v.n_maps, K, mode, rng)
    return SegmentSet(tuple(v.frames[i] for i in idx))


@dataclass
class MetricsLog:
    """Training log: ``iter,phase,loss,lr`` and ``epoch,split,accuracy`` records."""

    steps: list[tuple[int, str, float, float]] = field(default_factory=list)
    evals: list[tuple[int, str, float]] = field(default_factory=list)
    stream: TextIO | None = None

    def step(self, it: int, phase: str, loss: float, lr: float) -> None:
        self.steps.append((it, phase, loss, lr))
        if self.stream is not None:
            self.stream.write(f"{it},{phase},{loss!r},{lr!r}\n")

    def eval(self, epoch: int, split: str, acc: float) -> None:
        self.evals.append((epoch, split, acc))
        if self.stream is not None:
            self.stream.write(f"{epoch},{split},{acc!r}\n")

    def losses(self) -> np.ndarray:
        return np.array([s[2] for s in self.steps])

    def final_accuracy(self, split: str) -> float | None:
        accs = [a for _, s, a in self.evals if s == split]
        return accs[-1] if accs else None


def _epoch_plan(ds: FeatureDataset, cfg: TrainConfig, epoch: int):
    """Visit order and train-mode segment draws for one epoch.

    Everything comes from one generator seeded by ``(seed, epoch)``, so a
    resumed run recreates the identical plan for a partially done epoch.
    """
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(ds))
    draws = [segment_indices(ds.videos[i].n_maps, cfg.K, "train", rng) for i in order]
    return order, draws


def _check_dataset(model: TleModel, ds: FeatureDataset) -> None:
    if ds.n_classes != model.n_classes:
        raise ShapeError(f"dataset has {ds.n_classes} classes, model was built for {model.n_classes}")
    if ds.map_shape != model.map_shape:
        raise ShapeError(f"dataset maps are {ds.map_shape}, model expects {model.map_shape}")


def train(dataset: FeatureDataset, config: TrainConfig | None = None, model: TleModel | None = None,
          log: MetricsLog | None = None, test_dataset: FeatureDataset | None = None,
          callback: Callable[[TleModel, int, float], None] | None = None, until: int | None = None):
    """Train (or resume training) until ``config.total_iters`` iterations.

    Returns ``(model, log)``.  Passing a model continues from its stored
    iteration count and momentum buffers; ``until`` stops early at that
    iteration count so a run can be split and resumed.
    """
    if dataset is None or len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if model is None:
        config = config or TrainConfig()
        model = TleModel.init(config, dataset.n_classes, dataset.map_shape)
    else:
        config = config or model.config
        model.config = config
    _check_dataset(model, dataset)
    if test_dataset is not None:
        _check_dataset(model, test_dataset)
    log = log if log is not None else MetricsLog()

    N, B = len(dataset), config.batch_size
    steps_per_epoch = math.ceil(N / B)
    plan_epoch, plan = -1, None
    stop = config.total_iters if until is None else min(until, config.total_iters)
    while model.iteration < stop:
        t = model.iteration
        epoch, b = divmod(t, steps_per_epoch)
        if epoch != plan_epoch:
            plan, plan_epoch = _epoch_plan(dataset, config, epoch), epoch
        order, draws = plan
        sel = range(b * B, min((b + 1) * B, N))
        stack = np.stack([dataset.videos[order[j]].frames[draws[j]] for j in sel], axis=1)
        labels = np.array([dataset.videos[order[j]].label for j in sel])

        phase = config.phase_at(t)
        lr = config.lr_at(t)
        loss, _, grads, _ = forward_backward(model, stack, labels)
        if not (math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())):
            raise FloatingPointError(f"training diverged at iteration {t} (lr={lr:g}); lower the learning rate")
        sgd_step(model, {k: grads[k] for k in model.trainable(phase)}, lr)
        model.iteration += 1
        log.step(t, phase, loss, lr)
        if callback is not None:
            callback(model, t, loss)

        end_of_epoch = (t + 1) % steps_per_epoch == 0
        if (end_of_epoch and (epoch + 1) % config.eval_every == 0) or model.iteration == config.total_iters:
            log.eval(epoch, "train", evaluate(model, dataset)["accuracy"])
            if test_dataset is not None:
                log.eval(epoch, "test", evaluate(model, test_dataset)["accuracy"])
    return model, log


def _group_stack(model: TleModel, v: VideoRecord, groups: int) -> np.ndarray:
    idx = group_indices(v.n_maps, model.config.K, groups)
    # (K, groups, h, w, c)
    return np.stack([v.frames[i] for i in idx], axis=1)


def predict_video(model: TleModel, v: VideoRecord, groups: int | None = None):
    """Average the logits of ``groups`` segment sets; arg-max with ties to the lowest class."""
    groups = groups or model.config.test_groups
    logits = batch_logits(model, _group_stack(model, v, groups))
    scores = logits.mean(axis=0)
    return int(np.argmax(scores)), scores


def predict_dataset(model: TleModel, ds: FeatureDataset, groups: int | None = None) -> np.ndarray:
    """Video-level scores (mean logits over groups), one row per video."""
    groups = groups or model.config.test_groups
    _check_dataset(model, ds)
    stack = np.concatenate([_group_stack(model, v, groups) for v in ds.videos], axis=1)
    logits = batch_logits(model, stack)
    return logits.reshape(len(ds), groups, -1).mean(axis=1)


def evaluate(model: TleModel, ds: FeatureDataset, groups: int | None = None) -> dict:
    scores = predict_dataset(model, ds, groups)
    pred = np.argmax(scores, axis=1)
    labels = ds.labels
    per_class = {}
    for c in range(ds.n_classes):
        mask = labels == c
        per_class[c] = (int(mask.sum()), float(np.mean(pred[mask] == c)) if mask.any() else float("nan"))
    return {"accuracy": float(np.mean(pred == labels)), "predictions": pred, "scores": scores,
            "per_class": per_class}


def fuse_streams(spatial_logits, temporal_logits, weights=(0.5, 0.5), space: str = "logits") -> np.ndarray:
    """Weighted mean of two streams' scores.

    ``space="logits"`` averages pre-softmax scores; ``space="probs"`` averages
    softmax probabilities instead.
    """
    a = np.asarray(spatial_logits, dtype=np.float64)
    b = np.asarray(temporal_logits, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"stream score shapes differ: {a.shape} vs {b.shape}")
    wa, wb = weights
    if space == "probs":
        a, b = softmax(a), softmax(b)
    elif space != "logits":
        raise ValueError(f"space must be 'logits' or 'probs', got {space!r}")
    total = wa + wb
    if total <= 0:
        raise ValueError("fusion weights must have a positive sum")
    return (wa * a + wb * b) / total


def compare_aggregations(modes=("product", "average", "maximum"), seeds: int = 5, difficulty: float = 1.0,
                         d: int = 64, iters: int = 1200, report=None) -> dict[str, list[float]]:
    """Test accuracy per aggregation mode over ``seeds`` synthetic benchmarks.

    Each seed draws its own dataset; every mode trains a tensor-sketch model
    with the same schedule.  ``report(mode, seed, train_acc, test_acc)`` is
    called after each run.
    """
    results = {m: [] for m in modes}
    for seed in range(seeds):
        tr = synth_dataset(difficulty=difficulty, seed=seed)
        te = synth_dataset(difficulty=difficulty, seed=seed, split="test")
        for mode in modes:
            cfg = TrainConfig(aggregation=mode, sketch_dim=d, max_iters=iters,
                              lr_step=max(1, 2 * iters // 3), seed=seed, eval_every=10 ** 6)
            model, _ = train(tr, cfg)
            acc_te = evaluate(model, te)["accuracy"]
            results[mode].append(acc_te)
            if report is not None:
                report(mode, seed, evaluate(model, tr)["accuracy"], acc_te)
    return results
