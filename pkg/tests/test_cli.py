import csv
import json

import pytest

from pedghmm.cli import PREDICT_HEADER, main
from pedghmm.eval import load_trajectories


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A corridor scene, corpora, cost map and a trained model."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--kind", "corridor", "--output-dir", str(d), "--n-train", "4", "--n-test", "2",
                 "--seed", "3"]) == 0
    assert main(["build-map", "--scene", str(d / "scene.txt"), "--output-dir", str(d / "map")]) == 0
    assert main(["train", "--scene", str(d / "scene.txt"), "--cost-map", str(d / "map" / "costmap.bin"),
                 "--trajectories", str(d / "train.csv"), "--output-dir", str(d / "model")]) == 0
    return d


def test_train_outputs(workspace):
    names = {p.name for p in (workspace / "model").iterdir()}
    assert {"model.ghmm", "topology.txt", "model.txt"} <= names
    assert (workspace / "map" / "costmap.csv").exists()


def test_predict_trace(workspace):
    tr = load_trajectories(workspace / "test.csv")[0]
    H = 10
    assert main(["predict", "--model", str(workspace / "model" / "model.ghmm"), "--trajectories",
                 str(workspace / "test.csv"), "--id", tr.id, "--horizon", str(H),
                 "--output-dir", str(workspace / "pred")]) == 0
    rows = list(csv.reader(open(workspace / "pred" / f"predict_{tr.id}.csv")))
    assert rows[0] == PREDICT_HEADER
    assert rows[0] == ["step", "t", "obs_x", "obs_y", "mode_node", "mode_x", "mode_y", "pred_x", "pred_y",
                       "truth_x", "truth_y", "error", "map_goal"]
    body = rows[1:]
    assert len(body) == len(tr)
    col = PREDICT_HEADER.index("truth_x")
    assert all(r[col] != "" for r in body[:len(tr) - H]) and all(r[col] == "" for r in body[len(tr) - H:])


def test_evaluate_writes_errors(workspace):
    assert main(["evaluate", "--model", str(workspace / "model" / "model.ghmm"), "--trajectories",
                 str(workspace / "test.csv"), "--horizon", "10", "--output-dir", str(workspace / "ev")]) == 0
    rows = list(csv.reader(open(workspace / "ev" / "errors.csv")))
    n = sum(max(0, len(tr) - 10) for tr in load_trajectories(workspace / "test.csv"))
    assert len(rows) == n + 1


def test_build_map_and_train_are_deterministic(workspace, tmp_path):
    assert main(["build-map", "--scene", str(workspace / "scene.txt"), "--output-dir", str(tmp_path / "m")]) == 0
    assert (tmp_path / "m" / "costmap.bin").read_bytes() == (workspace / "map" / "costmap.bin").read_bytes()
    assert main(["train", "--scene", str(workspace / "scene.txt"), "--cost-map",
                 str(workspace / "map" / "costmap.bin"), "--trajectories", str(workspace / "train.csv"),
                 "--output-dir", str(tmp_path / "t")]) == 0
    for name in ("model.ghmm", "topology.txt", "model.txt"):
        assert (tmp_path / "t" / name).read_bytes() == (workspace / "model" / name).read_bytes()


def test_baseline_training(workspace, tmp_path):
    assert main(["train", "--baseline", "--scene", str(workspace / "scene.txt"), "--trajectories",
                 str(workspace / "train.csv"), "--output-dir", str(tmp_path)]) == 0
    assert (tmp_path / "model.ghmm").exists()


def test_config_file_and_override(workspace, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scene": str(workspace / "scene.txt"), "output_dir": str(tmp_path / "o"),
                               "resolution": 1.0}))
    assert main(["build-map", "--config", str(cfg), "--resolution", "0.5"]) == 0
    assert (tmp_path / "o" / "costmap.bin").read_bytes() == (workspace / "map" / "costmap.bin").read_bytes()
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["build-map", "--config", str(cfg)]) == 1
    assert "bogus" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["build-map", "--scene", "/nonexistent/scene.txt", "--output-dir", "{tmp}"],
    ["build-map", "--output-dir", "{tmp}"],
    ["build-map", "--scene", "{scene}", "--output-dir", "{tmp}", "--resolution", "-1"],
    ["train", "--scene", "{scene}", "--trajectories", "{train}", "--output-dir", "{tmp}", "--tau", "500"],
    ["train", "--scene", "{scene}", "--trajectories", "{train}", "--output-dir", "{tmp}",
     "--bw-learning-rate", "0"],
    ["predict", "--model", "{tmp}/missing.ghmm", "--trajectories", "{train}", "--id", "c0",
     "--output-dir", "{tmp}"],
])
def test_input_errors_exit_1(workspace, tmp_path, argv, capsys):
    subs = {"tmp": str(tmp_path), "scene": str(workspace / "scene.txt"), "train": str(workspace / "train.csv")}
    assert main([a.format(**subs) for a in argv]) == 1
    assert capsys.readouterr().err.startswith("pedghmm:")


def test_invalid_config_writes_nothing(workspace, tmp_path):
    out = tmp_path / "never"
    assert main(["train", "--scene", str(workspace / "scene.txt"), "--trajectories", str(workspace / "train.csv"),
                 "--output-dir", str(out), "--sigma-obs", "0"]) == 1
    assert not out.exists()


def test_unknown_trajectory_id(workspace, tmp_path):
    assert main(["predict", "--model", str(workspace / "model" / "model.ghmm"), "--trajectories",
                 str(workspace / "test.csv"), "--id", "nope", "--output-dir", str(tmp_path)]) == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0 and "pedghmm" in capsys.readouterr().out
