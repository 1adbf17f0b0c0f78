import json

import pytest

from circuitkit.cli import main
from circuitkit.fileio import read_csv


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["build-model", "--task", "reverse", "--out", "rev.ctm", "--circuit", "canon.json"]) == 0
    assert main(["gen-data", "--task", "reverse", "--n", "30", "--seed", "1", "--out", "rev.json"]) == 0
    return tmp_path


def test_reverse_roc_auc_is_one(work):
    taus = "0.0001,0.001,0.01,0.1"
    assert main(["sweep", "acdc", "--model", "rev.ctm", "--data", "rev.json", "--ablation", "zero", "--taus", taus, "--out-dir", "sw"]) == 0
    circuits = sorted(str(p) for p in (work / "sw").glob("circuit_*.json"))
    assert main(["eval", "auc", "--model", "rev.ctm", "--circuits", *circuits, "--canonical", "canon.json", "--out", "auc.csv"]) == 0
    assert float(read_csv("auc.csv")[0]["auc"]) == 1.0
    assert main(["eval", "roc", "--model", "rev.ctm", "--circuits", *circuits, "--params", taus, "--canonical", "canon.json", "--out", "roc.csv"]) == 0
    assert (work / "roc.csv").read_text().splitlines()[0] == "param,fpr,tpr"


def test_documented_example_thresholds(work):
    assert main(["run", "acdc", "--model", "rev.ctm", "--data", "rev.json", "--tau", "0.0575", "--out", "c.json"]) == 0
    man = json.loads((work / "c.json.manifest.json").read_text())
    assert man["config"]["tau"] == 0.0575 and set(man["inputs"]) == {"rev.ctm", "rev.json"}


def test_methods_and_outputs(work):
    assert main(["run", "hisp", "--model", "rev.ctm", "--data", "rev.json", "--k", "3", "--out", "h.json", "--log", "h.log", "--dot", "h.dot"]) == 0
    assert main(["run", "sp", "--model", "rev.ctm", "--data", "rev.json", "--lambda", "0.1", "--steps", "5", "--seed", "0", "--out", "s.json"]) == 0
    assert main(["eval", "pareto", "--model", "rev.ctm", "--data", "rev.json", "--circuits", "h.json", "s.json", "--out", "p.csv"]) == 0
    assert (work / "p.csv").read_text().startswith("edges,metric\n")
    assert main(["eval", "reset", "--model", "rev.ctm", "--seed", "2", "--out", "reset.ctm"]) == 0
    assert (work / "h.dot").read_text().startswith("digraph")


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "acdc", "--model", "rev.ctm", "--data", "rev.json", "--out", "x.json"],  # no tau
        ["run", "acdc", "--model", "rev.ctm", "--data", "rev.json", "--tau", "0", "--out", "x.json"],
        ["gen-data", "--task", "reverse", "--n", "3", "--out", "x.json"],  # no seed
        ["train", "--task", "induction", "--out", "x.ctm"],  # no seed
        ["run", "sp", "--model", "rev.ctm", "--data", "rev.json", "--lambda", "1", "--out", "x.json"],
        ["frobnicate"],
        ["sweep", "acdc", "--model", "rev.ctm", "--data", "rev.json", "--taus", "a,b", "--out-dir", "d"],
    ],
)
def test_usage_errors_exit_1(work, argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: ") and "\n" not in err


def test_runtime_errors_exit_2(work, capsys):
    assert main(["run", "acdc", "--model", "missing.ctm", "--data", "rev.json", "--tau", "1", "--out", "x.json"]) == 2
    (work / "bad.json").write_text('{"edges": ["a9.h9->m0.in"]}')
    assert main(["eval", "auc", "--model", "rev.ctm", "--circuits", "bad.json", "--canonical", "canon.json", "--out", "a.csv"]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 2 and all(l.startswith("error: ") for l in err)


def test_rerun_detects_changed_input(work):
    assert main(["run", "acdc", "--model", "rev.ctm", "--data", "rev.json", "--tau", "0.1", "--out", "c.json"]) == 0
    assert main(["gen-data", "--task", "reverse", "--n", "30", "--seed", "2", "--out", "rev.json"]) == 0
    assert main(["rerun", "--manifest", "c.json.manifest.json"]) == 2


def test_threads_cap(work):
    assert main(["--threads", "1", "run", "acdc", "--model", "rev.ctm", "--data", "rev.json", "--tau", "0.1", "--out", "c.json"]) == 0
    assert json.loads((work / "c.json.manifest.json").read_text())["config"]["threads"] == 1
    assert main(["--threads", "0", "gen-data", "--task", "reverse", "--n", "3", "--seed", "0", "--out", "x.json"]) == 1


def test_train_smoke(work):
    (work / "cfg.json").write_text('{"steps": 3, "batch": 4}')
    assert main(["train", "--task", "induction", "--config", "cfg.json", "--seed", "0", "--out", "t.ctm"]) == 0
    man = json.loads((work / "t.ctm.manifest.json").read_text())
    assert man["config"]["steps"] == 3 and man["seeds"] == {"train": 0}
    (work / "bad.json").write_text('{"stepz": 3}')
    assert main(["train", "--task", "induction", "--config", "bad.json", "--seed", "0", "--out", "t.ctm"]) == 1
