import csv
import io
import json

import pytest

from fedunlearn.cli import build_parser, main

TINY = [
    "dataset.n_users=40", "dataset.n_items=60", "model.dim=8", "model.rounds=2", "model.fraction=0.5",
    "adversary.hidden=8", "attack.epochs=20", "attack.hidden=8", "attack.dlg_steps=10", "attack.dlg_restarts=1",
]


def sets(*extra):
    out = []
    for item in TINY + list(extra):
        out += ["--set", item]
    return out


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def trained(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--out", str(tmp_path / "run"), *sets())
    assert code == 0
    return tmp_path / "run", json.loads(out)


def test_train_prints_metrics_and_writes_run(trained):
    path, summary = trained
    assert summary["run_dir"] == str(path)
    assert 0.0 <= summary["ndcg10"] <= 1.0
    assert (path / "metrics.csv").exists() and (path / "seed0" / "checkpoint.npz").exists()


def test_eval_reproduces_training_metrics(trained, capsys):
    path, summary = trained
    code, out, _ = run(capsys, "eval", str(path))
    assert code == 0
    assert json.loads(out)[0]["ndcg10"] == summary["ndcg10"]


def test_attack_replays_embedding_and_gradients(trained, capsys):
    path, summary = trained
    code, out, _ = run(capsys, "attack", str(path), "--method", "all")
    assert code == 0
    entry = json.loads(out)[0]
    assert entry["bacc"] == summary["bacc"]
    assert entry["grad_attack_acc"] == summary["grad_attack_acc"]
    code, out, _ = run(capsys, "attack", str(path), "--method", "idlg")
    assert 0.0 <= json.loads(out)[0]["grad_attack_acc"] <= 1.0


def test_prep_writes_dataset(tmp_path, capsys):
    code, out, _ = run(capsys, "prep", "--out", str(tmp_path / "ds.json"), *sets())
    info = json.loads(out)
    assert code == 0 and info["users"] == 40 and info["holdout"] == 40
    assert json.loads((tmp_path / "ds.json").read_text())


def test_sweep_and_report(tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", "lambda", "0", "4", "--out", str(tmp_path / "sw"), "--format", "json",
                       *sets("attack.gradient=none"))
    rows = json.loads(out)
    assert code == 0 and [r["lambda"] for r in rows] == [0.0, 4.0]
    code, out, _ = run(capsys, "sweep", "sut", "binary", "always", "--out", str(tmp_path / "sut"),
                       *sets("attack.gradient=none"))
    table = list(csv.DictReader(io.StringIO(out)))
    assert [r["sut_mode"] for r in table] == ["binary", "always"]
    csvs = [str(p) for p in sorted((tmp_path / "sw").glob("*/metrics.csv"))]
    code, out, _ = run(capsys, "report", *csvs, "--out", str(tmp_path / "merged.csv"))
    merged = list(csv.DictReader(open(tmp_path / "merged.csv")))
    assert code == 0 and len(merged) == 2


def test_errors_exit_with_code_two(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--set", "model.nope=1")
    assert code == 2 and "FormatError" in err
    code, _, err = run(capsys, "eval", str(tmp_path))
    assert code == 2


def test_parser_rejects_unknown_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["fly"])
