import json

import numpy as np
import pytest

from ungraph.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from ungraph.graph import FeaturedGraph, is_connected, read_jsonl, write_jsonl
from ungraph.gradcheck import UNPOOL_MLPS

from .conftest import complete, path

TRAIN_TOML = """
[data]
n_nodes = 12

[train]
preset = "waxman-desk"
batch_size = 8
eval_interval = 2
eval_count = 16
critic_mpnn = [4, 4]
critic_gate = 4
critic_dense = [4, 4]
adj_widths = [8, 8]
reinforce_reduction = "mean"
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.toml").write_text(TRAIN_TOML)
    assert main(["gen-data", "--count", "150", "--seed", "1", "--out", str(root / "data.jsonl")]) == EXIT_OK
    assert main(["gen-data", "--count", "60", "--seed", "2", "--out", str(root / "ref.jsonl")]) == EXIT_OK
    args = ["train", "--config", str(root / "cfg.toml"), "--data", str(root / "data.jsonl"), "--reference", str(root / "ref.jsonl")]
    assert main(args + ["--iters", "4", "--out", str(root / "run")]) == EXIT_OK
    return root


def test_gen_data_is_deterministic(tmp_path):
    for k in range(2):
        assert main(["gen-data", "--count", "40", "--seed", "9", "--out", str(tmp_path / f"{k}.jsonl")]) == EXIT_OK
    assert (tmp_path / "0.jsonl").read_bytes() == (tmp_path / "1.jsonl").read_bytes()
    assert main(["gen-data", "--count", "0", "--out", str(tmp_path / "empty.jsonl")]) == EXIT_OK
    assert (tmp_path / "empty.jsonl").read_text() == ""


def test_train_outputs(workspace):
    run = workspace / "run"
    assert {"checkpoint.json", "checkpoint_0.json", "metrics.csv"} <= {p.name for p in run.iterdir()}
    assert len((run / "metrics.csv").read_text().splitlines()) == 3


def test_train_zero_iterations(workspace, tmp_path):
    args = ["train", "--config", str(workspace / "cfg.toml"), "--data", str(workspace / "data.jsonl"), "--iters", "0", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    assert (tmp_path / "checkpoint_0.json").exists()


@pytest.mark.parametrize("mode", ["vae", "adj"])
def test_train_modes(workspace, tmp_path, mode):
    args = ["train", "--config", str(workspace / "cfg.toml"), "--data", str(workspace / "data.jsonl"), "--mode", mode, "--iters", "2", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK


def test_resume_matches_uninterrupted_run(workspace, tmp_path):
    base = ["train", "--config", str(workspace / "cfg.toml"), "--data", str(workspace / "data.jsonl"), "--seed", "4"]
    assert main(base + ["--iters", "4", "--out", str(tmp_path / "full")]) == EXIT_OK
    assert main(base + ["--iters", "2", "--out", str(tmp_path / "half")]) == EXIT_OK
    resume = ["train", "--data", str(workspace / "data.jsonl"), "--resume", str(tmp_path / "half" / "checkpoint.json"), "--iters", "4"]
    assert main(resume + ["--out", str(tmp_path / "rest")]) == EXIT_OK
    a = json.loads((tmp_path / "full" / "checkpoint.json").read_text())
    b = json.loads((tmp_path / "rest" / "checkpoint.json").read_text())
    assert a["tensors"] == b["tensors"]


def test_sample_is_deterministic_and_connected(workspace, tmp_path):
    ck = str(workspace / "run" / "checkpoint.json")
    for k in range(2):
        assert main(["sample", "--checkpoint", ck, "--count", "3", "--seed", "5", "--out", str(tmp_path / f"{k}.jsonl")]) == EXIT_OK
    assert (tmp_path / "0.jsonl").read_bytes() == (tmp_path / "1.jsonl").read_bytes()
    lines = (tmp_path / "0.jsonl").read_text().splitlines()
    assert len(lines) == 3
    for line in lines:
        rec = json.loads(line)
        assert rec["logp"] <= 0
        assert is_connected(FeaturedGraph.from_json(rec))
    assert main(["sample", "--checkpoint", ck, "--count", "2", "--best", "--out", str(tmp_path / "b.jsonl")]) == EXIT_OK


def test_eval_self_is_zero(workspace, tmp_path):
    ref = str(workspace / "ref.jsonl")
    assert main(["eval", "--generated", ref, "--reference", ref, "--out", str(tmp_path)]) == EXIT_OK
    head, row = (tmp_path / "report.csv").read_text().split()
    assert head.split(",")[0] == "kl_edge_density" and head.split(",")[4] == "wd_edge_density"
    values = [float(v) for v in row.split(",")]
    assert max(values[:4]) < 1e-6 and values[4:] == [0.0] * 4
    assert (tmp_path / "report.txt").exists()
    assert (tmp_path / "histograms.csv").read_text().startswith("property,set,bin_left,bin_right,frequency")


def test_roundtrip(tmp_path, capsys):
    write_jsonl(tmp_path / "tri.jsonl", [complete(3)])
    assert main(["roundtrip", "--data", str(tmp_path / "tri.jsonl"), "-v"]) == EXIT_OK
    assert "chain=0" in capsys.readouterr().out
    rng = np.random.default_rng(0)
    from ungraph.graph import random_connected_graph

    write_jsonl(tmp_path / "twelve.jsonl", [random_connected_graph(12, rng)])
    assert main(["roundtrip", "--data", str(tmp_path / "twelve.jsonl"), "-v"]) == EXIT_OK
    assert "chain=2" in capsys.readouterr().out
    assert main(["roundtrip", "--count", "50"]) == EXIT_OK
    write_jsonl(tmp_path / "bad.jsonl", [FeaturedGraph.from_edges(4, [(0, 1), (2, 3)])])
    assert main(["roundtrip", "--data", str(tmp_path / "bad.jsonl")]) == EXIT_DATA


def test_gradcheck_report(capsys):
    assert main(["gradcheck", "--count", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in UNPOOL_MLPS:
        assert name in out
    assert "FAIL" not in out


def test_gradcheck_negative_control(capsys):
    assert main(["gradcheck", "--count", "1", "--corrupt"]) == EXIT_CHECK
    assert "FAIL" in capsys.readouterr().out


def test_interpolate_emits_eleven_steps(workspace, tmp_path):
    ck = str(workspace / "run" / "checkpoint.json")
    out = tmp_path / "interp.jsonl"
    assert main(["interpolate", "--checkpoint", ck, "--step", "0.1", "--seed", "3", "--out", str(out)]) == EXIT_OK
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 11
    assert recs[0]["t"] == 0.0 and recs[-1]["t"] == 1.0
    assert all(is_connected(FeaturedGraph.from_json(r)) for r in recs)
    again = tmp_path / "again.jsonl"
    assert main(["interpolate", "--checkpoint", ck, "--step", "0.5", "--seed", "3", "--out", str(again)]) == EXIT_OK
    ends = [json.loads(line) for line in again.read_text().splitlines()]
    for a, b in ((recs[0], ends[0]), (recs[-1], ends[-1])):
        assert a["edges"] == b["edges"] and a["x"] == b["x"]


def test_error_exit_codes(workspace, tmp_path):
    assert main(["eval", "--generated", str(tmp_path / "missing.jsonl"), "--reference", str(tmp_path / "missing.jsonl")]) == EXIT_DATA
    (tmp_path / "bad.toml").write_text("[train\n")
    assert main(["gen-data", "--config", str(tmp_path / "bad.toml"), "--out", str(tmp_path / "x.jsonl")]) == EXIT_CONFIG
    (tmp_path / "unknown.toml").write_text("[train]\nwarp = 1\n")
    args = ["train", "--config", str(tmp_path / "unknown.toml"), "--data", str(workspace / "data.jsonl"), "--out", str(tmp_path)]
    assert main(args) == EXIT_CONFIG
    assert main(["sample", "--checkpoint", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    assert main(["interpolate", "--checkpoint", str(workspace / "run" / "checkpoint.json"), "--step", "0"]) == EXIT_CONFIG
    assert main(["gen-data", "--count", "-1"]) == EXIT_CONFIG
    (tmp_path / "garbled.jsonl").write_text("{not json\n")
    assert main(["roundtrip", "--data", str(tmp_path / "garbled.jsonl")]) == EXIT_DATA
    with pytest.raises(SystemExit):
        main(["train"])
