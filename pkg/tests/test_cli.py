import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import FIXTURES
from tle.cli import cli, read_scores
from tle.data import read_dataset


def run(capsys, *argv):
    code = cli([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(out):
    return dict(line.split(",", 1) for line in out.splitlines() if "," in line)


@pytest.fixture
def data(tmp_path, capsys):
    tr, te = tmp_path / "train.tlef", tmp_path / "test.tlef"
    assert run(capsys, "synth", "--out", tr, "--seed", 0)[0] == 0
    assert run(capsys, "synth", "--out", te, "--seed", 0, "--split", "test")[0] == 0
    return tr, te


def test_synth(data):
    tr, te = data
    ds = read_dataset(tr)
    assert len(ds) == 100 and ds.map_shape == (4, 4, 8)
    assert not read_dataset(tr) == read_dataset(te)


def test_train_eval_roundtrip(tmp_path, capsys, data):
    tr, te = data
    model = tmp_path / "m.tlem"
    code, out, _ = run(capsys, "train", "--data", tr, "--test-data", te, "--out", model,
                       "--sketch-dim", 64, "--max-iters", 200, "--lr-step", 100)
    assert code == 0
    r = rows(out)
    assert r["iterations"] == "200"
    assert float(r["train_accuracy"]) >= 0.95 and float(r["test_accuracy"]) >= 0.9
    assert os.path.exists(r["figure"]) and os.path.getsize(r["figure"]) > 0
    log_lines = open(r["log"]).read().splitlines()
    assert log_lines[0].startswith("0,full,")

    scores = tmp_path / "s.csv"
    code, out, _ = run(capsys, "eval", "--model", model, "--data", te, "--scores-out", scores,
                       "--figure", tmp_path / "cm.png")
    assert code == 0
    assert float(rows(out)["accuracy"]) == float(r["test_accuracy"])
    assert "class,name,videos,accuracy" in out
    assert os.path.exists(tmp_path / "cm.png")
    ids, labels, s = read_scores(scores)
    assert len(ids) == 100 and s.shape == (100, 5)


def test_zero_model_scores_chance(tmp_path, capsys, data):
    tr, te = data
    model = tmp_path / "zero.tlem"
    assert run(capsys, "train", "--data", tr, "--out", model, "--max-iters", 0, "--sketch-dim", 16,
               "--no-figures")[0] == 0
    code, out, _ = run(capsys, "eval", "--model", model, "--data", te, "--no-figures")
    # every score ties, so every video goes to class 0
    assert code == 0 and rows(out)["accuracy"] == "0.2000"


def test_resume_via_cli(tmp_path, capsys, data):
    tr, _ = data
    common = ["--data", tr, "--sketch-dim", 32, "--max-iters", 120, "--lr-step", 50, "--no-figures"]
    assert run(capsys, "train", "--out", tmp_path / "full.tlem", *common)[0] == 0
    assert run(capsys, "train", "--out", tmp_path / "half.tlem", "--until", 60, *common)[0] == 0
    code, out, _ = run(capsys, "train", "--out", tmp_path / "rest.tlem", "--resume", tmp_path / "half.tlem",
                       "--data", tr, "--no-figures")
    assert code == 0 and rows(out)["iterations"] == "120"
    assert (tmp_path / "rest.tlem").read_bytes() == (tmp_path / "full.tlem").read_bytes()
    code, _, err = run(capsys, "train", "--out", tmp_path / "x.tlem", "--resume", tmp_path / "half.tlem",
                       "--data", tr, "--sketch-dim", 64)
    assert code == 1 and "resume" in err


def test_config_file(tmp_path, capsys, data):
    tr, _ = data
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# toy run\nencoder = fc\nmax_iters = 20\n")
    code, out, _ = run(capsys, "train", "--data", tr, "--out", tmp_path / "m.tlem", "--config", cfg,
                       "--no-figures", "--max-iters", 10)
    assert code == 0
    # fc trains in two phases, flag beats file
    assert rows(out)["iterations"] == "20"
    lines = open(rows(out)["log"]).read().splitlines()
    assert lines[0].split(",")[3] == "0.01"


def test_gradcheck_exit_zero(capsys):
    code, out, _ = run(capsys, "gradcheck", "--trials", 3)
    assert code == 0
    assert "FAIL" not in out and out.count(",pass") == 14


def test_bench_prints_dimensions(capsys):
    code, out, _ = run(capsys, "bench", "--no-figures", "--repeats", 1)
    assert code == 0
    assert 'full_bilinear,"1,048,576",' in out
    assert 'tensor_sketch,"8,196",' in out


def test_bench_figure(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--c", 16, "--d", 32, "--h", 2, "--w", 2, "--out-dir", tmp_path)
    assert code == 0 and os.path.exists(tmp_path / "bench.png")
    assert 'full_bilinear,"256",' in out


def test_fuse_fixture(tmp_path, capsys):
    out_csv = tmp_path / "fused.csv"
    code, out, _ = run(capsys, "fuse", "--spatial", os.path.join(FIXTURES, "spatial_scores.csv"),
                       "--temporal", os.path.join(FIXTURES, "temporal_scores.csv"), "--out", out_csv)
    assert code == 0
    r = rows(out)
    assert (r["spatial_accuracy"], r["temporal_accuracy"], r["fused_accuracy"]) == ("0.5000", "0.6000", "0.8000")
    _, _, got = read_scores(out_csv)
    _, _, want = read_scores(os.path.join(FIXTURES, "fused_expected.csv"))
    np.testing.assert_array_equal(got, want)
    assert os.path.exists(tmp_path / "fused.png")


def test_fuse_mismatched_files(tmp_path, capsys):
    src = os.path.join(FIXTURES, "spatial_scores.csv")
    with open(src) as fh:
        body = list(csv.reader(fh))
    with open(tmp_path / "short.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(body[:-1])
    code, _, err = run(capsys, "fuse", "--spatial", src, "--temporal", tmp_path / "short.csv", "--no-figures")
    assert code == 1 and "error" in err


def test_compare_small(tmp_path, capsys):
    code, out, _ = run(capsys, "compare", "--seeds", 1, "--iters", 30, "--out-dir", tmp_path)
    assert code == 0
    assert out.startswith("mode,seed,train_accuracy,test_accuracy")
    assert os.path.exists(tmp_path / "aggregation.png")


def test_exit_codes(tmp_path, capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "train")[0] == 2
    code, _, err = run(capsys, "eval", "--model", tmp_path / "missing.tlem", "--data", tmp_path / "missing.tlef")
    assert code == 1 and "error" in err
    bad = tmp_path / "bad.tlef"
    bad.write_bytes(b"NOPE" + bytes(20))
    code, _, err = run(capsys, "train", "--data", bad, "--out", tmp_path / "m.tlem")
    assert code == 1 and "magic" in err


def test_module_entry_point():
    argv = ["bench", "--c", "4", "--d", "8", "--h", "1", "--w", "1", "--no-figures"]
    proc = subprocess.run([sys.executable, "-m", "tle", *argv], capture_output=True, text=True)
    assert proc.returncode == 0 and 'full_bilinear,"16",' in proc.stdout
