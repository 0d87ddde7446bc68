import csv
import json

import numpy as np
import pytest

from sparsebone.cli import main
from sparsebone.io_ct import VolumeMeta, read_rawz, write_rawz
from sparsebone.network import init_network, load_checkpoint

SPEC = {"shape": [24, 24, 20], "num_classes": 3, "primitives": [
    {"kind": "ellipsoid", "class_id": 1, "count": 1, "radius": [3, 5]},
    {"kind": "tube", "class_id": 2, "count": 2, "radius": [1.2, 1.6], "length": [10, 16]}]}
CONFIG = {"network": {"levels": 2, "base_widths": [2, 4], "width_factor": 1.0, "num_classes": 3},
          "sampling": {"window": 16, "rho": 0.33}, "optim": {"lr": 0.003}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps(SPEC))
    (d / "train.json").write_text(json.dumps(CONFIG))
    assert main(["phantom", "--spec", str(d / "spec.json"), "--count", "2", "--seed", "7",
                 "--out", str(d / "data")]) == 0
    assert main(["train", "--data", str(d / "data"), "--config", str(d / "train.json"),
                 "--steps", "5", "--seed", "1", "--out", str(d / "model.bnt")]) == 0
    return d


def test_phantom_deterministic(workspace, tmp_path):
    assert main(["phantom", "--spec", str(workspace / "spec.json"), "--count", "2",
                 "--seed", "7", "--out", str(tmp_path)]) == 0
    for name in ["case_000_hu.rawz", "case_001_labels.rawz", "case_001_hu.rawz.json",
                 "dataset.json"]:
        assert (tmp_path / name).read_bytes() == (workspace / "data" / name).read_bytes()
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["command"] == "phantom" and run["seed"] == 7 and run["exit_status"] == 0


def test_phantom_errors(tmp_path, capsys):
    assert main(["phantom", "--spec", str(tmp_path / "nope.json"), "--count", "1",
                 "--out", str(tmp_path / "o")]) == 2
    assert "nope.json" in capsys.readouterr().err
    assert main(["phantom", "--count", "0", "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o" / "run.json").exists()
    assert main(["phantom", "--out", str(tmp_path / "o")]) == 1  # missing --count
    assert main(["frobnicate"]) == 1
    (tmp_path / "bad.json").write_text('{"shape": [8, 8, 8], "num_classes": 2, "primitives": '
                                       '[{"kind": "cube", "class_id": 1}]}')
    assert main(["phantom", "--spec", str(tmp_path / "bad.json"), "--count", "1",
                 "--out", str(tmp_path / "o")]) == 2


def test_train_outputs(workspace):
    ckpt = load_checkpoint(workspace / "model.bnt")
    assert ckpt.config.num_classes == 3 and ckpt.seed == 1
    rows = list(csv.reader(open(str(workspace / "model.bnt") + ".loss.csv")))
    assert rows[0] == ["step", "loss"] and len(rows) == 1 + 5
    assert all(float(r[1]) > 0 for r in rows[1:])
    run = json.loads(open(str(workspace / "model.bnt") + ".run.json").read())
    assert run["command"] == "train" and run["timings"]["train"] >= 0


def test_train_zero_steps_is_init(workspace, tmp_path):
    out = tmp_path / "z.bnt"
    assert main(["train", "--data", str(workspace / "data"), "--config",
                 str(workspace / "train.json"), "--steps", "0", "--seed", "4",
                 "--out", str(out)]) == 0
    ckpt = load_checkpoint(out)
    ref = init_network(ckpt.config, 4)
    assert all(np.array_equal(ckpt.params[k], ref[k]) for k in ref)
    assert open(str(out) + ".loss.csv").read().splitlines() == ["step,loss"]


def test_train_errors(workspace, tmp_path):
    assert main(["train", "--data", str(tmp_path), "--steps", "1", "--out",
                 str(tmp_path / "m.bnt")]) == 2
    assert main(["train", "--data", str(workspace / "data"), "--steps", "-1", "--out",
                 str(tmp_path / "m.bnt")]) == 1


def test_infer_end_to_end(workspace, tmp_path, capsys):
    vol = workspace / "data" / "case_000_hu.rawz"
    outs = []
    for w in ("1", "8"):
        out = tmp_path / f"mask{w}.rawz"
        assert main(["infer", "--ckpt", str(workspace / "model.bnt"), "--in", str(vol),
                     "--out", str(out), "--workers", w]) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    mask, meta = read_rawz(outs[0])
    hu, hmeta = read_rawz(vol)
    assert mask.shape == hu.shape and meta.kind == "labels" and mask.max() < 3
    assert not mask[hu < 200].any()
    run = json.loads(open(str(outs[0]) + ".run.json").read())
    assert all(run["timings"][k] >= 0 for k in ("preprocess", "forward", "fuse"))
    assert run["config"]["window"] == 16 and run["config"]["workers"] == 1
    assert "windows" in capsys.readouterr().out


def test_infer_worker_env(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("BONNET_NUM_WORKERS", "3")
    out = tmp_path / "m.rawz"
    assert main(["infer", "--ckpt", str(workspace / "model.bnt"), "--in",
                 str(workspace / "data" / "case_001_hu.rawz"), "--out", str(out)]) == 0
    assert json.loads(open(str(out) + ".run.json").read())["config"]["workers"] == 3
    assert main(["infer", "--ckpt", str(workspace / "model.bnt"), "--in",
                 str(workspace / "data" / "case_001_hu.rawz"), "--out", str(out),
                 "--workers", "2"]) == 0
    assert json.loads(open(str(out) + ".run.json").read())["config"]["workers"] == 2


def test_infer_errors(workspace, tmp_path):
    vol = str(workspace / "data" / "case_000_hu.rawz")
    assert main(["infer", "--ckpt", str(tmp_path / "none.bnt"), "--in", vol,
                 "--out", str(tmp_path / "m.rawz")]) == 2
    (tmp_path / "junk.bnt").write_bytes(b"junk" * 10)
    assert main(["infer", "--ckpt", str(tmp_path / "junk.bnt"), "--in", vol,
                 "--out", str(tmp_path / "m.rawz")]) == 2
    assert not (tmp_path / "m.rawz.run.json").exists()


def _cube_masks(tmp_path):
    a = np.zeros((8, 8, 10), np.uint16)
    b = np.zeros_like(a)
    a[2:6, 2:6, 2:6] = 1
    b[2:6, 2:6, 4:8] = 1
    meta = VolumeMeta((10, 8, 8), (1, 1, 1), "labels")
    write_rawz(tmp_path / "a.rawz", a, meta)
    write_rawz(tmp_path / "b.rawz", b, meta)
    (tmp_path / "groups.json").write_text('{"rib": [1], "pelvis": [2]}')


def test_eval(tmp_path, capsys):
    _cube_masks(tmp_path)
    g = str(tmp_path / "groups.json")
    assert main(["eval", "--pred", str(tmp_path / "a.rawz"), "--gt", str(tmp_path / "a.rawz"),
                 "--groups", g, "--out", str(tmp_path / "same.json")]) == 0
    report = json.loads((tmp_path / "same.json").read_text())
    assert all(v == 100.0 for v in report["dice"].values())
    capsys.readouterr()
    assert main(["eval", "--pred", str(tmp_path / "a.rawz"), "--gt", str(tmp_path / "b.rawz"),
                 "--groups", g]) == 0
    out = capsys.readouterr().out
    assert "50.00" in out
    report = json.loads((tmp_path / "a.rawz.dice.json").read_text())
    assert abs(report["dice"]["rib"] - 50.0) <= 1e-6
    assert abs(report["dice"]["overall"] - 50.0) <= 1e-6
    assert report["empty_both"] == ["pelvis"]
    assert (tmp_path / "a.rawz.dice.json.run.json").exists()


def test_eval_errors(tmp_path):
    _cube_masks(tmp_path)
    assert main(["eval", "--pred", str(tmp_path / "a.rawz"), "--gt", str(tmp_path / "b.rawz"),
                 "--groups", str(tmp_path / "missing.json")]) == 2
    write_rawz(tmp_path / "c.rawz", np.zeros((2, 2, 2), np.uint16),
               VolumeMeta((2, 2, 2), (1, 1, 1), "labels"))
    assert main(["eval", "--pred", str(tmp_path / "a.rawz"), "--gt", str(tmp_path / "c.rawz"),
                 "--groups", str(tmp_path / "groups.json")]) == 2


def test_bench_single_repeat(workspace, tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert main(["bench", "--ckpt", str(workspace / "model.bnt"), "--in",
                 str(workspace / "data" / "case_000_hu.rawz"), "--mode", "both",
                 "--repeat", "1", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    for mode in ("sparse", "dense"):
        samples = report["modes"][mode]["samples"]
        assert set(samples) == {"preprocess", "forward", "fuse"}
        assert all(len(v) == 1 and v[0] >= 0 for v in samples.values())
    assert report["label_agreement"] == 1.0
    assert "speedup" in capsys.readouterr().out
    assert main(["bench", "--ckpt", str(workspace / "model.bnt"), "--in",
                 str(workspace / "data" / "case_000_hu.rawz"), "--repeat", "0"]) == 1
    assert main(["bench", "--ckpt", str(workspace / "model.bnt"), "--in",
                 str(workspace / "data" / "case_000_hu.rawz"), "--mode", "gpu"]) == 1
