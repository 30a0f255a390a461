"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure (including failed gradient
checks), 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
import time

import numpy as np

from . import plotting
from .bilinear import bilinear, bilinear_dim
from .data import read_dataset, synth_dataset, write_dataset
from .gradcheck import SUITES, run_suites
from .model import TrainConfig
from .persist import load_model, save_model
from .sketch import TensorSketchEncoder, tensor_sketch
from .training import MetricsLog, compare_aggregations, evaluate, fuse_streams, train


def _shape(text: str) -> tuple[int, int, int]:
    try:
        h, w, c = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected h,w,c, got {text!r}") from None
    return h, w, c


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration (overrides --config)")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            g.add_argument(flag, dest=f.name, default=None, type=lambda s: s, metavar="BOOL")
        else:
            kind = {"int": int, "float": float}.get(str(f.type).replace(" | None", ""), str)
            g.add_argument(flag, dest=f.name, default=None, type=kind)


def _config_from_args(args, base: TrainConfig | None = None) -> TrainConfig:
    # merge raw values first so an encoder-dependent default (lr) is resolved
    # against the final encoder choice
    values = dataclasses.asdict(base) if base is not None else {}
    if args.config:
        with open(args.config) as fh:
            values = TrainConfig.parse_mapping(fh.read())
    values.update({f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)
                   if getattr(args, f.name) is not None})
    return TrainConfig.from_mapping(values)


def _figure_path(args, default: str) -> str | None:
    if getattr(args, "no_figures", False):
        return None
    return getattr(args, "figure", None) or default


def _structure(cfg: TrainConfig):
    return cfg.K, cfg.aggregation, cfg.encoder, cfg.sketch_dim, cfg.fc_dim, cfg.seed


def cmd_synth(args) -> int:
    ds = synth_dataset(args.classes, args.videos_per_class, args.frames, args.shape, args.difficulty,
                       args.seed, args.split, args.stream)
    write_dataset(ds, args.out)
    h, w, c = args.shape
    print(f"wrote {args.out}: {len(ds)} videos, {ds.n_classes} classes, {args.frames} maps of {h}x{w}x{c}")
    return 0


def cmd_train(args) -> int:
    ds = read_dataset(args.data)
    test = read_dataset(args.test_data, split="test") if args.test_data else None
    model = load_model(args.resume, ds) if args.resume else None
    # a resumed run keeps its stored configuration unless overridden
    cfg = _config_from_args(args, model.config if model is not None else None)
    if model is not None and _structure(cfg) != _structure(model.config):
        raise ValueError("--resume cannot change K, aggregation, encoder, dimensions or seed")
    log_path = args.log or os.path.splitext(args.out)[0] + ".log"
    t0 = time.perf_counter()
    with open(log_path, "a" if args.resume else "w") as fh:
        log = MetricsLog(stream=fh)
        model, log = train(ds, cfg, model=model, log=log, test_dataset=test, until=args.until)
    save_model(model, args.out)
    elapsed = time.perf_counter() - t0
    print(f"iterations,{model.iteration}")
    print(f"final_loss,{log.steps[-1][2]:.6f}" if log.steps else "final_loss,nan")
    for split in ("train", "test"):
        acc = log.final_accuracy(split)
        if acc is not None:
            print(f"{split}_accuracy,{acc:.4f}")
    print(f"seconds,{elapsed:.2f}")
    print(f"model,{args.out}")
    print(f"log,{log_path}")
    fig = _figure_path(args, os.path.splitext(args.out)[0] + ".loss.png")
    if fig and log.steps:
        print(f"figure,{plotting.loss_curve(log.steps, log.evals, fig)}")
    return 0


def _write_scores(path, ds, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "label"] + [f"score_{k}" for k in range(scores.shape[1])])
        for v, row in zip(ds.videos, scores):
            w.writerow([v.id, v.label] + [repr(float(x)) for x in row])


def read_scores(path):
    """Per-video score file: ``video_id,label,score_0,...``.  Returns (ids, labels, scores)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["video_id", "label"]:
        raise ValueError(f"{path}: missing 'video_id,label,score_*' header")
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: no score rows")
    ids = [r[0] for r in body]
    labels = np.array([int(r[1]) for r in body])
    scores = np.array([[float(x) for x in r[2:]] for r in body])
    return ids, labels, scores


def cmd_eval(args) -> int:
    ds = read_dataset(args.data, split="test")
    model = load_model(args.model, ds)
    res = evaluate(model, ds, args.groups)
    print(f"accuracy,{res['accuracy']:.4f}")
    print("class,name,videos,accuracy")
    for c, (n, acc) in res["per_class"].items():
        print(f"{c},{ds.class_names[c]},{n},{acc:.4f}")
    if args.scores_out:
        _write_scores(args.scores_out, ds, res["scores"])
        print(f"scores,{args.scores_out}")
    fig = _figure_path(args, os.path.splitext(args.model)[0] + ".confusion.png")
    if fig:
        print(f"figure,{plotting.confusion(ds.labels, res['predictions'], ds.class_names, fig)}")
    return 0


def cmd_gradcheck(args) -> int:
    names = args.suite or list(SUITES)
    t0 = time.perf_counter()
    results = run_suites(names, trials=args.trials, seed=args.seed, replay_dir=args.replay_dir)
    failed = 0
    print("suite,trials,max_rel_err,tolerance,status")
    for name, reports in results.items():
        ok = all(r.passed for r in reports)
        trials = len({r.trial for r in reports})
        worst = max((r.max_rel for r in reports), default=0.0)
        print(f"{name},{trials},{worst:.3e},{SUITES[name][1]:g},{'pass' if ok else 'FAIL'}")
        if not ok:
            failed += 1
            bad = next(r for r in reports if not r.passed)
            print(f"  first failure: {bad}", file=sys.stderr)
    print(f"seconds,{time.perf_counter() - t0:.2f}")
    return 1 if failed else 0


def cmd_fuse(args) -> int:
    ids_a, lab_a, sa = read_scores(args.spatial)
    ids_b, lab_b, sb = read_scores(args.temporal)
    if ids_a != ids_b or not np.array_equal(lab_a, lab_b):
        raise ValueError("score files list different videos or labels")
    fused = fuse_streams(sa, sb, args.weights, args.space)
    accs = {
        "spatial": float(np.mean(np.argmax(sa, 1) == lab_a)),
        "temporal": float(np.mean(np.argmax(sb, 1) == lab_a)),
        "fused": float(np.mean(np.argmax(fused, 1) == lab_a)),
    }
    for k, v in accs.items():
        print(f"{k}_accuracy,{v:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["video_id", "label"] + [f"score_{k}" for k in range(fused.shape[1])])
            for vid, lab, row in zip(ids_a, lab_a, fused):
                w.writerow([vid, int(lab)] + [repr(float(x)) for x in row])
        print(f"fused_scores,{args.out}")
    fig = _figure_path(args, os.path.splitext(args.out)[0] + ".png" if args.out else None)
    if fig:
        print(f"figure,{plotting.fusion_bars(accs, fig)}")
    return 0


def cmd_bench(args) -> int:
    h, w, c, d = args.h, args.w, args.c, args.d
    full = bilinear_dim(c)
    X = np.random.default_rng(args.seed).random((h, w, c))
    enc = TensorSketchEncoder.create(c, d, args.seed)

    def timed(fn):
        fn()
        t0 = time.perf_counter()
        for _ in range(args.repeats):
            fn()
        return (time.perf_counter() - t0) / args.repeats

    t_full = timed(lambda: bilinear(X))
    t_ts = timed(lambda: tensor_sketch(X, enc))
    print(f"input,{h}x{w}x{c}")
    print("encoder,feature_dim,ms_per_map")
    print(f'full_bilinear,"{full:,}",{1e3 * t_full:.3f}')
    print(f'tensor_sketch,"{d:,}",{1e3 * t_ts:.3f}')
    print(f"compression_ratio,{full / d:.1f}")
    fig = _figure_path(args, os.path.join(args.out_dir, "bench.png") if args.out_dir else None)
    if fig:
        print(f"figure,{plotting.bench_bars([('full bilinear', full, t_full), ('tensor sketch', d, t_ts)], fig)}")
    return 0


def cmd_compare(args) -> int:
    """Train one model per aggregation mode and seed on a synthetic benchmark."""
    print("mode,seed,train_accuracy,test_accuracy")

    def report(mode, seed, acc_tr, acc_te):
        print(f"{mode},{seed},{acc_tr:.4f},{acc_te:.4f}")

    results = compare_aggregations(args.modes, args.seeds, args.difficulty, args.d, args.iters, report)
    for mode, accs in results.items():
        print(f"{mode},mean,,{np.mean(accs):.4f}")
    fig = _figure_path(args, os.path.join(args.out_dir, "aggregation.png") if args.out_dir else None)
    if fig:
        print(f"figure,{plotting.aggregation_bars(results, fig)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tle", description="Temporal linear encoding on pre-extracted feature maps.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic TLEF dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--videos-per-class", type=int, default=20)
    s.add_argument("--frames", type=int, default=12)
    s.add_argument("--shape", type=_shape, default=(4, 4, 8), help="h,w,c")
    s.add_argument("--difficulty", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", choices=["train", "test"], default="train")
    s.add_argument("--stream", choices=["spatial", "temporal"], default="spatial")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a TLEF dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--test-data")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--resume", help="model file to continue training from")
    t.add_argument("--until", type=int, help="stop once the model has run this many iterations")
    t.add_argument("--log", help="metrics log path (default: <out>.log)")
    t.add_argument("--figure", help="loss-curve image path (default: <out>.loss.png)")
    t.add_argument("--no-figures", action="store_true")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="video-level accuracy of a model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--groups", type=int, help="segment groups per video (default: model config)")
    e.add_argument("--scores-out", help="write per-video scores CSV")
    e.add_argument("--figure")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--trials", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--suite", action="append", choices=sorted(SUITES))
    g.add_argument("--replay-dir", help="write failing instances here as TLEF files")
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("fuse", help="late fusion of two per-video score files")
    f.add_argument("--spatial", required=True)
    f.add_argument("--temporal", required=True)
    f.add_argument("--weights", type=_pair, default=(0.5, 0.5))
    f.add_argument("--space", choices=["logits", "probs"], default="logits")
    f.add_argument("--out", help="fused scores CSV")
    f.add_argument("--figure")
    f.add_argument("--no-figures", action="store_true")
    f.set_defaults(func=cmd_fuse)

    b = sub.add_parser("bench", help="full bilinear vs tensor sketch dimension and timing")
    b.add_argument("--c", type=int, default=1024)
    b.add_argument("--d", type=int, default=8196)
    b.add_argument("--h", type=int, default=14)
    b.add_argument("--w", type=int, default=14)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out-dir", help="directory for the bench figure")
    b.add_argument("--figure")
    b.add_argument("--no-figures", action="store_true")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("compare", help="aggregation-mode comparison on synthetic data")
    a.add_argument("--modes", nargs="+", default=["product", "average", "maximum"],
                   choices=["product", "average", "maximum"])
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--difficulty", type=float, default=1.0)
    a.add_argument("--d", type=int, default=64)
    a.add_argument("--iters", type=int, default=1200)
    a.add_argument("--out-dir")
    a.add_argument("--figure")
    a.add_argument("--no-figures", action="store_true")
    a.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"tle {args.command}: error: {exc}", file=sys.stderr)
        return 1


def cli(argv=None) -> int:
    """Run the CLI and return its exit code (usage errors return 2)."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1


if __name__ == "__main__":
    sys.exit(main())
