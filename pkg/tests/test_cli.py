import csv
import os

import numpy as np
import pytest

from slimforge import autodiff as ad, blobio, cli, graph_ir, slimming

TINY = """
[data]
train_scenes = 12
eval_scenes = 6
image_size = 32
batch_size = 6
[backbone]
width = 4
groups = 2
[slim]
epochs = 1
[branch]
extras_width = 8
[detector]
epochs = 1
teacher_epochs = 1
"""


@pytest.fixture
def tiny_ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return str(p)


@pytest.fixture
def toy_graph_file(tmp_path):
    g = graph_ir.build_toy_backbone(4, 2)
    p = tmp_path / "toy.graph.json"
    p.write_text(graph_ir.serialize(g))
    return str(p)


def run(argv):
    return cli.main(argv)


def test_cost_outputs_csv(toy_graph_file, capsys):
    assert run(["cost", toy_graph_file, "--input", "32x32"]) == 0
    out = capsys.readouterr().out
    rows = list(csv.DictReader(out.splitlines()))
    assert any(r["node"] == "stem_conv" for r in rows)
    total = [r for r in rows if r["node"] == "TOTAL"]
    assert total and int(total[0]["params"]) > 0
    assert any(r["node"] == "CAPACITY_MB" and float(r["params"]) > 0
               for r in rows)


def test_cost_missing_file_exits_nonzero(capsys):
    assert run(["cost", "/nonexistent.graph.json"]) == 1
    assert "[cost]" in capsys.readouterr().err


def test_slim_train_plan_prune_chain(tiny_ini, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(["slim-train", "--config", tiny_ini, "--seed", "0"]) == 0
    assert os.path.exists("backbone.graph.json")
    assert os.path.exists("gammas.bin")

    assert run(["plan", "gammas.bin", "--rate", "0.3",
                "--graph", "backbone.graph.json", "--out", "plan.txt"]) == 0
    plan = slimming.plan_from_text(open("plan.txt").read())
    assert plan.masks

    assert run(["prune", "backbone.graph.json", "backbone.params.bin",
                "plan.txt"]) == 0
    pruned = graph_ir.deserialize(open("pruned.graph.json").read())
    assert graph_ir.validate(pruned) == []
    base = graph_ir.deserialize(open("backbone.graph.json").read())
    n_base = sum(n.attrs.get("out_channels", 0) for n in base.nodes.values())
    n_pruned = sum(n.attrs.get("out_channels", 0) for n in pruned.nodes.values())
    assert n_pruned < n_base
    assert os.path.exists("remap.txt")


def test_branch_prune_command(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    g = graph_ir.attach_detection_branches(
        graph_ir.strip_classifier_head(graph_ir.build_toy_backbone(4, 2)),
        [{"feature_node_id": "g2_b2_out", "num_anchors": 2, "num_classes": 4,
          "extras_width": 16}])
    with open("det.graph.json", "w") as f:
        f.write(graph_ir.serialize(g))
    assert run(["branch-prune", "det.graph.json", "--rate", "0.5"]) == 0
    out = graph_ir.deserialize(open("branch_pruned.graph.json").read())
    assert out.nodes["br0_ex_conv"].attrs["out_channels"] == 8
    params = blobio.unflatten_params(blobio.load_blob("branch_pruned.params.bin"))
    assert params["br0_ex_conv"]["weight"].shape[0] == 8


def test_plan_invalid_rate_fails(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    blobio.save_blob({"bn": np.ones(4, np.float32)}, "g.bin")
    assert run(["plan", "g.bin", "--rate", "1.5"]) == 1
    assert "[plan]" in capsys.readouterr().err


def test_pipeline_and_report(tiny_ini, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert run(["pipeline", "--config", tiny_ini, "--seed", "0",
                "--out", out]) == 0
    stdout = capsys.readouterr().out
    assert "teacher: accuracy=" in stdout
    assert run(["report", out]) == 0
    report = capsys.readouterr().out
    rows = list(csv.DictReader(report.splitlines()))
    assert {r["variant"] for r in rows} == {"teacher", "+P", "+P+R", "+P+R+KD"}


def test_train_subset(tiny_ini, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert run(["train", "--config", tiny_ini, "--seed", "1",
                "--out", out]) == 0
    stdout = capsys.readouterr().out
    assert "+P:" in stdout and "+P+R:" in stdout and "teacher" not in stdout


def test_unknown_command_rejected():
    with pytest.raises(SystemExit):
        cli.main(["unknown-verb"])
