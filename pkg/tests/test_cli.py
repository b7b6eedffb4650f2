import json

import numpy as np
import pytest

from normprop.cli import main
from normprop.graph import load_graph
from normprop.prototypes import load_prototypes

FAST = ["--epochs", "15", "--hidden", "8", "--dim", "4", "--proto-iters", "200"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-sbm", "--nodes-per-class", "40", "--p-intra", "0.15", "--seed", "1",
                 "--out", str(d / "g.json")]) == 0
    assert main(["split", "--graph", str(d / "g.json"), "--shots", "3", "--val-per-class", "10",
                 "--out", str(d / "gs.json")]) == 0
    assert main(["prototypes", "--classes", "3", "--dim", "4", "--iters", "300", "--out", str(d / "p.json")]) == 0
    return d


def test_no_args_exit_1(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exit_1(capsys):
    assert main(["train", "--no-such-flag"]) == 1
    assert "unrecognized" in capsys.readouterr().err


def test_bad_flag_value_exit_1():
    assert main(["train", "--K", "two"]) == 1


def test_missing_file_exit_2(tmp_path, capsys):
    assert main(["train", "--graph", str(tmp_path / "nope.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_malformed_graph_exit_2(tmp_path, capsys):
    (tmp_path / "g.json").write_text('{"num_nodes": 2,')
    assert main(["split", "--graph", str(tmp_path / "g.json"), "--shots", "1", "--out", str(tmp_path / "o")]) == 2
    assert "line 1" in capsys.readouterr().err


def test_invalid_config_value_exit_2(workdir):
    assert main(["train", "--graph", str(workdir / "gs.json"), "--lam", "5"]) == 2


def test_unknown_config_key_exit_2(workdir, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"graph": str(workdir / "gs.json"), "alpha": 1}))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 2


def test_prototypes_command(tmp_path):
    assert main(["prototypes", "--classes", "3", "--dim", "2", "--out", str(tmp_path / "p.json")]) == 0
    rows = np.array(json.loads((tmp_path / "p.json").read_text())["rows"])
    assert rows.shape == (3, 2)
    np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-9)


def test_gen_and_split_outputs(workdir):
    g = load_graph(workdir / "gs.json")
    assert g.num_nodes == 120 and g.num_classes == 3
    assert g.train_mask.sum() == 9 and g.val_mask.sum() == 30
    assert load_prototypes(workdir / "p.json").num_classes == 3


def test_train_end_to_end(workdir, tmp_path, capsys):
    out = tmp_path / "s.json"
    args = ["train", "--graph", str(workdir / "gs.json"), "--prototypes", str(workdir / "p.json"), *FAST,
            "--metrics", str(tmp_path / "m.csv"), "--summary", str(out), "--save-best", str(tmp_path / "ck.json")]
    assert main(args) == 0
    doc = json.loads(out.read_text())
    assert {"seed", "best_epoch", "val_acc", "test_acc", "final_global_bias", "config", "config_hash"} <= set(doc)
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 16
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "ck.json"), "--graph", str(workdir / "gs.json"),
                 "--prototypes", str(workdir / "p.json")]) == 0
    assert f"test accuracy {doc['test_acc']:.4f}" in capsys.readouterr().out


def test_config_file_with_flag_override(workdir, tmp_path):
    cfg = {"graph": str(workdir / "gs.json"), "epochs": 15, "hidden": 8, "dim": 4, "proto_iters": 200, "K": 1}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--K", "3", "--summary", str(tmp_path / "s.json")]) == 0
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["config"]["K"] == 3 and doc["config"]["hidden"] == 8


def test_train_metrics_byte_identical(workdir, tmp_path):
    base = ["train", "--graph", str(workdir / "gs.json"), *FAST, "--seed", "4"]
    assert main([*base, "--metrics", str(tmp_path / "a.csv")]) == 0
    assert main([*base, "--metrics", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_experiment_outputs_byte_identical(workdir, tmp_path):
    base = ["experiment", "--graph", str(workdir / "g.json"), *FAST, "--shots", "3", "--val-per-class", "10",
            "--runs", "3", "--base-seed", "2"]
    for tag in "ab":
        assert main([*base, "--metrics", str(tmp_path / f"{tag}.csv"), "--summary", str(tmp_path / f"{tag}.json")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0].startswith("run,epoch") and len(lines) == 1 + 3 * 15
    doc = json.loads((tmp_path / "a.json").read_text())
    assert [r["seed"] for r in doc["runs"]] == [2, 3, 4]


def test_bench_command(tmp_path, capsys):
    assert main(["bench", "--edges", "100", "200", "--nodes", "100", "--repeats", "3", "--dim", "4",
                 "--out", str(tmp_path / "b.json")]) == 0
    doc = json.loads((tmp_path / "b.json").read_text())
    assert len(doc["rows"]) == 2 and len(doc["ratios"]["edges"]) == 1
