import json

import numpy as np
import pytest

from smnet.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from smnet.cloud_io import read_cloud, write_cloud
from smnet.simulators import load_manifest

TINY_CFG = """version = 1
preset = desk
n_points = 128
out_dim = 36
kp_k = 5
kp_cell = 0.06
kp_widths = 4, 6, 8
kp_dec_widths = 6
kp_out = 3
sa_centroids = 16, 4
sa_radius = 0.2, 0.5
sa_group = 8, 8
sa_mlp = 6 | 8
fp_mlp = 8 | 6
fc_widths = 8
"""


def run_json(d):
    return json.loads((d / "run.json").read_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--mechanism", "thermal", "--topology", "plate", "--samples", "6", "--n-test", "2",
                 "--density", "12", "--seed", "3", "--out", str(root / "raw")]) == EXIT_OK
    assert main(["preprocess", "--in", str(root / "raw"), "--n-points", "128", "--cell", "0.25",
                 "--out", str(root / "proc")]) == EXIT_OK
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert main(["train", "--data", str(root / "proc"), "--config", str(root / "tiny.cfg"), "--epochs", "2",
                 "--batch", "2", "--lr", "0.01", "--seed", "1", "--out", str(root / "model")]) == EXIT_OK
    return root


def test_gen_is_reproducible(pipeline, tmp_path):
    assert main(["gen", "--mechanism", "thermal", "--topology", "plate", "--samples", "6", "--n-test", "2",
                 "--density", "12", "--seed", "3", "--out", str(tmp_path)]) == EXIT_OK
    assert run_json(tmp_path)["artifacts"] == run_json(pipeline / "raw")["artifacts"]


def test_gen_reports_control_dim(tmp_path, capsys):
    assert main(["gen", "--mechanism", "ionic", "--topology", "cube", "--samples", "0",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert "control_dim 216" in capsys.readouterr().out
    assert load_manifest(tmp_path)["samples"] == []


def test_preprocess_outputs_and_idempotence(pipeline, tmp_path):
    m = load_manifest(pipeline / "proc")
    assert m["stage"] == "processed" and m["preprocess"]["n_points"] == 128
    for s in m["samples"]:
        pts = read_cloud(pipeline / "proc" / s["file"]).points
        assert len(pts) == 128 and np.abs(pts).max() <= 0.5
    assert main(["preprocess", "--in", str(pipeline / "proc"), "--n-points", "128", "--cell", "0.25",
                 "--out", str(tmp_path)]) == EXIT_OK
    before = run_json(pipeline / "proc")["artifacts"]
    after = run_json(tmp_path)["artifacts"]
    assert {k: v for k, v in before.items() if k.startswith("clouds")} == \
        {k: v for k, v in after.items() if k.startswith("clouds")}


def test_preprocess_auto_n_points(pipeline, tmp_path, capsys):
    assert main(["preprocess", "--in", str(pipeline / "raw"), "--cell", "0.25", "--out", str(tmp_path)]) == EXIT_OK
    n = load_manifest(tmp_path)["preprocess"]["n_points"]
    assert f"n_points {n}" in capsys.readouterr().out


def test_preprocess_too_many_points(pipeline, tmp_path, capsys):
    code = main(["preprocess", "--in", str(pipeline / "raw"), "--n-points", "100000", "--out", str(tmp_path)])
    assert code == EXIT_DATA
    err = capsys.readouterr().err
    assert "fewer than 100000" in err and "5 (" in err
    assert run_json(tmp_path)["status"] == "failed"


def test_train_outputs_and_reproducibility(pipeline, tmp_path):
    out = pipeline / "model"
    for name in ("model.smn", "model.cfg", "history.csv", "metrics.json", "pipeline.json", "run.json"):
        assert (out / name).is_file()
    assert (out / "history.csv").read_text().splitlines()[0] == "epoch,train_mse,test_mse,test_mae,test_r2"
    assert main(["train", "--data", str(pipeline / "proc"), "--config", str(pipeline / "tiny.cfg"),
                 "--epochs", "2", "--batch", "2", "--lr", "0.01", "--seed", "1", "--out", str(tmp_path)]) == EXIT_OK
    for name in ("model.smn", "history.csv", "metrics.json"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_train_zero_epochs_keeps_init(pipeline, tmp_path):
    assert main(["train", "--data", str(pipeline / "proc"), "--config", str(pipeline / "tiny.cfg"),
                 "--epochs", "0", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.json").is_file()
    from smnet.model import SMNet, SMNetConfig
    init = SMNet(SMNetConfig.from_text(TINY_CFG))
    init.save(tmp_path / "init.smn")
    assert (tmp_path / "init.smn").read_bytes() == (tmp_path / "a" / "model.smn").read_bytes()


def test_train_divergence_exit_code(pipeline, tmp_path):
    code = main(["train", "--data", str(pipeline / "proc"), "--config", str(pipeline / "tiny.cfg"),
                 "--epochs", "3", "--lr", "1e30", "--out", str(tmp_path)])
    assert code == EXIT_NUMERIC
    assert run_json(tmp_path)["exit_code"] == EXIT_NUMERIC


def test_eval_matches_training_eval(pipeline, tmp_path):
    assert main(["eval", "--model", str(pipeline / "model" / "model.smn"), "--data", str(pipeline / "proc"),
                 "--out", str(tmp_path)]) == EXIT_OK
    a = json.loads((tmp_path / "metrics.json").read_text())
    b = json.loads((pipeline / "model" / "metrics.json").read_text())
    assert (a["mse"], a["mae"], a["r2"]) == (b["mse"], b["mae"], b["r2"])
    assert len((tmp_path / "per_dimension_error.csv").read_text().splitlines()) == 37
    act = np.loadtxt(tmp_path / "errmap_actuators.csv", delimiter=",")
    assert act.shape == (6, 6)
    assert (tmp_path / "errmap_face_plate.csv").is_file()


def test_eval_ablation_mismatch(pipeline, tmp_path):
    code = main(["eval", "--model", str(pipeline / "model" / "model.smn"), "--data", str(pipeline / "proc"),
                 "--ablation", "kpconv", "--out", str(tmp_path)])
    assert code == EXIT_DATA


def test_eval_dimension_mismatch(pipeline, tmp_path, capsys):
    cfg = TINY_CFG.replace("out_dim = 36", "out_dim = 5")
    (tmp_path / "m.cfg").write_text(cfg)
    from smnet.model import SMNet, SMNetConfig
    SMNet(SMNetConfig.from_text(cfg)).save(tmp_path / "m.smn")
    code = main(["eval", "--model", str(tmp_path / "m.smn"), "--data", str(pipeline / "proc"),
                 "--out", str(tmp_path / "e")])
    assert code == EXIT_DATA
    err = capsys.readouterr().err
    assert "5" in err and "36" in err


def test_infer_replay(pipeline, tmp_path):
    m = load_manifest(pipeline / "raw")
    target = pipeline / "raw" / m["samples"][5]["file"]
    assert main(["infer", "--model", str(pipeline / "model" / "model.smn"), "--target", str(target),
                 "--replay", "--seed", "4", "--out", str(tmp_path)]) == EXIT_OK
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert {"chamfer", "stddev", "hausdorff", "complexity_target", "complexity_replay"} <= set(metrics)
    pred = json.loads((tmp_path / "prediction.json").read_text())
    assert len(pred["control"]) == 36
    assert read_cloud(tmp_path / "replay.pcd").points.shape[1] == 3


def test_infer_missing_target(pipeline, tmp_path, capsys):
    code = main(["infer", "--model", str(pipeline / "model" / "model.smn"), "--target",
                 str(tmp_path / "gone.xyz"), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA
    assert "gone.xyz" in capsys.readouterr().err


def test_infer_accepts_xyz(pipeline, tmp_path):
    m = load_manifest(pipeline / "raw")
    pts = read_cloud(pipeline / "raw" / m["samples"][0]["file"]).points
    write_cloud(tmp_path / "t.xyz", pts)
    assert main(["infer", "--model", str(pipeline / "model" / "model.smn"), "--target", str(tmp_path / "t.xyz"),
                 "--out", str(tmp_path / "o")]) == EXIT_OK


@pytest.mark.parametrize("surface,check", [("plane", lambda v: abs(v) < 1e-9), ("dome", lambda v: v > 0)])
def test_complexity_surfaces(tmp_path, capsys, surface, check):
    assert main(["complexity", "--surface", surface, "--out", str(tmp_path)]) == EXIT_OK
    assert check(float(capsys.readouterr().out.strip().splitlines()[-1]))


def test_complexity_dome_saddle_and_waves(tmp_path, capsys):
    vals = {}
    for s in ("dome", "saddle", "wavy:3", "wavy:7"):
        assert main(["complexity", "--surface", s, "--grid", "64", "--out", str(tmp_path / s)]) == EXIT_OK
        vals[s] = float(capsys.readouterr().out.strip().splitlines()[-1])
    assert abs(vals["dome"] - vals["saddle"]) < 1e-9
    assert vals["wavy:3"] < vals["wavy:7"]


def test_complexity_of_a_file(pipeline, tmp_path, capsys):
    m = load_manifest(pipeline / "proc")
    f = pipeline / "proc" / m["samples"][0]["file"]
    assert main(["complexity", "--in", str(f), "--grid", "4", "--out", str(tmp_path)]) == EXIT_OK
    assert main(["complexity", "--in", str(f), "--grid", "64", "--out", str(tmp_path / "b")]) == EXIT_DATA
    assert "coarser" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["gen", "--mechanism", "steam", "--topology", "plate", "--samples", "1",
                 "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["complexity", "--out", str(tmp_path)]) == EXIT_USAGE
