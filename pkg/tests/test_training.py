import io
import math

import numpy as np
import pytest

from tle.aggregation import SegmentSet
from tle.classify import ClassifierHead
from tle.data import FeatureDataset, VideoRecord
from tle.model import TleModel, TrainConfig, forward_backward, forward_video, sgd_step
from tle.tensor import ShapeError
from tle.training import (MetricsLog, evaluate, fuse_streams, group_indices, part_bounds, predict_dataset,
                          predict_video, sample_segments, segment_indices, train)


def video(n, shape=(2, 2, 3), label=0, seed=0):
    frames = np.random.default_rng(seed).random((n,) + shape)
    return VideoRecord(f"v{seed}", label, frames)


# sampling

def test_centre_indices_30_maps():
    assert segment_indices(30, 3, "test") == [4, 14, 24]


def test_singleton_parts():
    rng = np.random.default_rng(0)
    assert segment_indices(3, 3, "test") == [0, 1, 2]
    assert segment_indices(3, 3, "train", rng) == [0, 1, 2]


def test_remainder_goes_to_first_parts():
    assert [hi - lo for lo, hi in part_bounds(10, 3)] == [4, 3, 3]
    assert part_bounds(11, 3) == [(0, 4), (4, 8), (8, 11)]


def test_train_draws_stay_in_their_part():
    rng = np.random.default_rng(1)
    seen = [set() for _ in range(3)]
    for _ in range(300):
        for k, i in enumerate(segment_indices(10, 3, "train", rng)):
            seen[k].add(i)
    assert seen == [{0, 1, 2, 3}, {4, 5, 6}, {7, 8, 9}]


def test_sampling_errors():
    with pytest.raises(ValueError):
        segment_indices(2, 3)
    with pytest.raises(ValueError):
        segment_indices(9, 3, "train")
    with pytest.raises(ValueError):
        segment_indices(9, 3, "middle")
    with pytest.raises(ValueError):
        sample_segments(video(2), 3)


def test_sample_segments_picks_frames():
    v = video(9)
    s = sample_segments(v, 3)
    assert isinstance(s, SegmentSet)
    np.testing.assert_array_equal(s.stack(), v.frames[[1, 4, 7]])


def test_group_indices():
    assert group_indices(30, 3, 1) == [[4, 14, 24]]
    groups = group_indices(30, 3, 5)
    assert groups[0] == [0, 10, 20] and groups[-1] == [8, 18, 28]
    assert all(len(set(col)) == 5 for col in zip(*groups))
    with pytest.raises(ValueError):
        group_indices(12, 3, 5)


# sgd

def tiny_model(**cfg):
    cfg.setdefault("encoder", "bilinear")
    return TleModel.init(TrainConfig(**cfg), 2, (1, 1, 1))


def test_sgd_update_arithmetic():
    m = tiny_model(momentum=0.9, weight_decay=0.0)
    m.head.weight[...] = 1.0
    sgd_step(m, {"W": np.ones((2, 1))}, 0.1)
    np.testing.assert_allclose(m.head.weight, 0.9)
    np.testing.assert_allclose(m.buffers["W"], 1.0)
    # second step: buffer = 0.9 * 1 + 1
    sgd_step(m, {"W": np.ones((2, 1))}, 0.1)
    np.testing.assert_allclose(m.buffers["W"], 1.9)
    np.testing.assert_allclose(m.head.weight, 0.9 - 0.19)


def test_sgd_weight_decay_term():
    m = tiny_model(momentum=0.0, weight_decay=0.5)
    m.head.weight[...] = 2.0
    sgd_step(m, {"W": np.zeros((2, 1))}, 0.1)
    np.testing.assert_allclose(m.head.weight, 2.0 - 0.1 * 1.0)


def test_sgd_zero_fixed_point():
    m = tiny_model(weight_decay=0.0)
    m.head.weight[...] = 0.3
    sgd_step(m, {k: np.zeros_like(p) for k, p in m.params().items()}, 1.0)
    np.testing.assert_array_equal(m.head.weight, 0.3)
    np.testing.assert_array_equal(m.head.bias, 0.0)


def test_sgd_errors():
    m = tiny_model()
    with pytest.raises(ShapeError):
        sgd_step(m, {"W": np.ones(3)}, 0.1)
    with pytest.raises(KeyError):
        sgd_step(m, {"fc_W": np.ones(3)}, 0.1)


def test_sgd_deterministic_100_steps(tiny_dataset):
    cfg = TrainConfig(encoder="tensor_sketch", sketch_dim=16, max_iters=100, lr_step=50)
    a, _ = train(tiny_dataset, cfg)
    b, _ = train(tiny_dataset, cfg)
    for k, p in a.params().items():
        assert p.tobytes() == b.params()[k].tobytes()
        assert a.buffers[k].tobytes() == b.buffers[k].tobytes()


# forward_video

def test_zero_head_gives_uniform_loss(rng):
    for enc in ("bilinear", "tensor_sketch", "fc"):
        m = TleModel.init(TrainConfig(encoder=enc, sketch_dim=32), 4, (2, 2, 3))
        m.head.bias[...] = 0.0
        if enc == "fc":
            # logits are constant whatever the FC encoder emits
            m.fc.weight[...] = rng.normal(size=m.fc.weight.shape)
        loss, logits = forward_video(m, SegmentSet(tuple(rng.random((3, 2, 2, 3)))), label=1)
        assert np.all(logits == logits[0])
        assert loss == pytest.approx(math.log(4), abs=1e-12)


@pytest.mark.parametrize("enc,rtol", [("bilinear", 1e-12), ("tensor_sketch", 1e-6)])
def test_duplicate_segments_under_product(rng, enc, rtol):
    # sketch buckets that no channel pair reaches hold FFT roundoff, which the
    # signed square root lifts to ~1e-8; hence the looser sketch tolerance
    m = TleModel.init(TrainConfig(encoder=enc, sketch_dim=32), 3, (2, 2, 3))
    m.head.weight[...] = rng.normal(size=m.head.weight.shape)
    S = rng.random((2, 2, 3)) + 0.5
    _, dup = forward_video(m, SegmentSet((S, S, S)))
    _, cubed = forward_video(m, SegmentSet((S ** 3, np.ones_like(S), np.ones_like(S))))
    np.testing.assert_allclose(dup, cubed, rtol=rtol, atol=rtol)


def test_forward_video_shape_errors(rng):
    m = TleModel.init(TrainConfig(encoder="bilinear"), 3, (2, 2, 3))
    with pytest.raises(ShapeError):
        forward_video(m, SegmentSet(tuple(rng.random((3, 2, 2, 4)))))
    with pytest.raises(ShapeError):
        forward_video(m, SegmentSet(tuple(rng.random((2, 2, 2, 3)))))


@pytest.mark.parametrize("enc", ["bilinear", "tensor_sketch", "fc"])
@pytest.mark.parametrize("mode", ["average", "maximum", "product"])
def test_random_instances_stay_finite(enc, mode):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        m = TleModel.init(TrainConfig(encoder=enc, aggregation=mode, sketch_dim=16, seed=seed), 3, (2, 2, 3))
        m.head.weight[...] = rng.normal(size=m.head.weight.shape)
        stack = rng.normal(size=(3, 4, 2, 2, 3))
        loss, logits, grads, dstack = forward_backward(m, stack, rng.integers(0, 3, 4), input_grad=True)
        assert math.isfinite(loss) and np.all(np.isfinite(logits)) and np.all(np.isfinite(dstack))
        assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_weight_sharing(rng):
    # one parameter set, whatever K is, and segment order does not matter
    a = TleModel.init(TrainConfig(encoder="fc", K=2), 3, (2, 2, 3))
    b = TleModel.init(TrainConfig(encoder="fc", K=5), 3, (2, 2, 3))
    assert {k: p.shape for k, p in a.params().items()} == {k: p.shape for k, p in b.params().items()}
    m = TleModel.init(TrainConfig(encoder="fc"), 3, (2, 2, 3))
    m.head.weight[...] = rng.normal(size=m.head.weight.shape)
    stack = rng.random((3, 2, 2, 2, 3)) + 0.1
    labels = np.array([0, 2])
    _, l1, g1, d1 = forward_backward(m, stack, labels, input_grad=True)
    _, l2, g2, d2 = forward_backward(m, stack[[2, 0, 1]], labels, input_grad=True)
    np.testing.assert_allclose(l1, l2, rtol=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(d1[[2, 0, 1]], d2, rtol=1e-10, atol=1e-14)


# predict

def test_predict_single_group_matches_forward_video(default_train):
    m, _ = train(default_train, TrainConfig(sketch_dim=32, max_iters=30))
    for v in default_train.videos[::17]:
        cls, scores = predict_video(m, v, groups=1)
        _, logits = forward_video(m, sample_segments(v, 3))
        np.testing.assert_allclose(scores, logits, rtol=1e-12, atol=1e-12)
        assert cls == int(np.argmax(logits))


def test_constant_logits_tie_to_class_zero():
    m = TleModel.init(TrainConfig(encoder="bilinear"), 4, (2, 2, 3))
    m.head.bias[...] = 2.5
    cls, scores = predict_video(m, video(9), groups=3)
    assert cls == 0 and np.all(scores == 2.5)


def test_prediction_shift_invariant(default_train):
    m, _ = train(default_train, TrainConfig(sketch_dim=32, max_iters=30))
    before = evaluate(m, default_train)["predictions"]
    m.head.bias += 123.0
    np.testing.assert_array_equal(evaluate(m, default_train)["predictions"], before)


def test_predict_dataset_rows_match_videos(tiny_dataset):
    m, _ = train(tiny_dataset, TrainConfig(sketch_dim=16, max_iters=20, test_groups=2))
    scores = predict_dataset(m, tiny_dataset)
    for v, row in zip(tiny_dataset.videos, scores):
        np.testing.assert_allclose(predict_video(m, v)[1], row, rtol=1e-12, atol=1e-12)


def test_predict_needs_enough_maps():
    m = TleModel.init(TrainConfig(encoder="bilinear"), 2, (2, 2, 3))
    with pytest.raises(ValueError):
        predict_video(m, video(6), groups=3)


# fusion

def test_fuse_identity_and_arithmetic():
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(fuse_streams(x, x), x)
    np.testing.assert_array_equal(fuse_streams([2, 0], [0, 2]), [1, 1])
    assert np.argmax(fuse_streams([10, 0], [0, 1])) == 0


def test_fuse_weights_and_probs():
    np.testing.assert_allclose(fuse_streams([4, 0], [0, 4], weights=(3, 1)), [3, 1])
    p = fuse_streams([0, 0], [0, 0], space="probs")
    np.testing.assert_allclose(p, [0.5, 0.5])


def test_fuse_errors():
    with pytest.raises(ShapeError):
        fuse_streams([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        fuse_streams([1], [1], space="votes")
    with pytest.raises(ValueError):
        fuse_streams([1], [1], weights=(0, 0))


# train

def test_empty_dataset_rejected():
    # FeatureDataset itself refuses to be empty
    with pytest.raises(ValueError):
        FeatureDataset(2, [])
    with pytest.raises(ValueError):
        train([], TrainConfig())
    with pytest.raises(ValueError):
        train(None)


def test_dataset_shape_checked(tiny_dataset, default_train):
    m = TleModel.init(TrainConfig(sketch_dim=16), tiny_dataset.n_classes, tiny_dataset.map_shape)
    with pytest.raises(ShapeError):
        train(default_train, model=m)


def test_zero_lr_freezes_parameters(tiny_dataset):
    cfg = TrainConfig(encoder="fc", lr=0.0, max_iters=15)
    m0 = TleModel.init(cfg, tiny_dataset.n_classes, tiny_dataset.map_shape)
    before = {k: p.copy() for k, p in m0.params().items()}
    m, log = train(tiny_dataset, cfg, model=m0)
    for k, p in m.params().items():
        np.testing.assert_array_equal(p, before[k])
    # zero head: every batch loss is ln C
    np.testing.assert_allclose(log.losses(), math.log(tiny_dataset.n_classes), rtol=1e-12)


def test_schedule_monotone_and_exact():
    cfg = TrainConfig(lr=0.5, lr_decay=0.1, lr_step=7, max_iters=30)
    rates = [cfg.lr_at(t) for t in range(cfg.total_iters)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))
    for t in range(1, len(rates)):
        if t % 7 == 0:
            assert rates[t] == pytest.approx(rates[t - 1] * 0.1, rel=1e-15)
        else:
            assert rates[t] == rates[t - 1]


def test_two_step_phases(tiny_dataset):
    cfg = TrainConfig(encoder="fc", max_iters=12, lr_step=5)
    assert cfg.n_phases == 2 and TrainConfig(encoder="tensor_sketch").n_phases == 1
    m0 = TleModel.init(cfg, tiny_dataset.n_classes, tiny_dataset.map_shape)
    fc0 = m0.fc.weight.copy()
    seen = []

    def watch(model, t, loss):
        seen.append((t, np.array_equal(model.fc.weight, fc0)))

    m, log = train(tiny_dataset, cfg, model=m0, callback=watch)
    assert [s[1] for s in log.steps] == ["head"] * 12 + ["full"] * 12
    # encoder frozen during the head phase, moving afterwards
    assert all(frozen for t, frozen in seen if t < 12)
    assert not seen[-1][1]
    # the schedule restarts for the fine-tuning phase
    assert log.steps[12][3] == cfg.lr


def test_metrics_log_lines(tiny_dataset):
    buf = io.StringIO()
    cfg = TrainConfig(sketch_dim=16, max_iters=8, batch_size=5)
    _, log = train(tiny_dataset, cfg, log=MetricsLog(stream=buf))
    lines = buf.getvalue().splitlines()
    steps = [ln for ln in lines if ln.count(",") == 3]
    evals = [ln for ln in lines if ln.count(",") == 2]
    assert len(steps) == 8 and steps[0].startswith("0,full,")
    # 12 videos in batches of 5 -> 3 iterations per epoch; evals at 2, 5 and the last iteration
    assert [e.split(",")[0] for e in evals] == ["0", "1", "2"]
    assert float(steps[3].split(",")[2]) == log.steps[3][2]


def test_learns_default_set(default_train, default_test):
    _, log = train(default_train, TrainConfig(sketch_dim=64, max_iters=300, lr_step=100),
                   test_dataset=default_test)
    assert log.final_accuracy("train") >= 0.95
    assert log.final_accuracy("test") >= 0.9


@pytest.mark.slow
def test_default_loss_curve_moving_average(default_train):
    # SGD batch losses keep fluctuating once the fit reaches the weight-decay
    # floor, so the 100-iteration moving average is checked at its
    # non-overlapping points: no later window may sit above an earlier one by
    # more than 3 standard errors of the window means, and no point of the
    # running average may exceed the first window.
    _, log = train(default_train, TrainConfig())
    L = log.losses()
    ma = np.convolve(L, np.ones(100) / 100, mode="valid")
    assert np.all(ma <= ma[0] + 1e-12)
    blocks = L.reshape(-1, 100)
    mu, se = blocks.mean(axis=1), blocks.std(axis=1, ddof=1) / 10
    for i in range(len(mu)):
        for j in range(i + 1, len(mu)):
            assert mu[j] <= mu[i] + 3 * math.hypot(se[i], se[j]), (i, j, mu[i], mu[j])
    assert mu[-1] < 0.5 * mu[0]
