import csv
import json
import shutil
import subprocess
import sys

import pytest

from textreprog.cli import main
from textreprog.oracle import TCPOracle

SMALL = ["--set", "orig_train=300", "--set", "orig_test=60", "--set", "adv_train=120", "--set", "adv_test=40"]


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--out", str(d / "data"), "--seed", "1", *SMALL]) == 0
    assert main(["train-victim", "--task", str(d / "data" / "original"), "--epochs", "2",
                 "--out", str(d / "victim")]) == 0
    return d


def _attack_args(d, out):
    return ["--victim", str(d / "victim"), "--task", str(d / "data" / "adversarial"),
            "--epochs", "1", "--k", "3", "--out", str(out)]


def test_gen_synth_layout(workspace):
    for part in ("original", "adversarial"):
        meta = json.loads((workspace / "data" / part / "task.json").read_text())
        assert meta["seed"] == 1
        lines = (workspace / "data" / part / "test.tsv").read_text().splitlines()
        assert len(lines) in (60, 40) and all("\t" in line for line in lines)


def test_train_victim_from_tsv_files(tmp_path, capsys):
    train = tmp_path / "train.tsv"
    train.write_text("pos\tgood fun\nneg\tbad dull\n" * 10)
    test = tmp_path / "test.tsv"
    test.write_text("pos\tfun good\nneg\tdull bad\n")
    assert main(["train-victim", "--arch", "cnn1", "--train", str(train), "--test", str(test),
                 "--mode", "char", "--epochs", "1", "--out", str(tmp_path / "v")]) == 0
    out = _json_out(capsys)
    assert 0 <= out["test_accuracy"] <= 1 and (tmp_path / "v").is_dir()


def test_attack_whitebox(workspace, tmp_path, capsys):
    assert main(["attack-whitebox", *_attack_args(workspace, tmp_path / "wb"), "--tmax", "3", "--tmin", "0.2"]) == 0
    rep = _json_out(capsys)
    assert 0 <= rep["argmax_acc"] <= 1
    with (tmp_path / "wb" / "metrics.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 1
    desc = json.loads((tmp_path / "wb" / "program" / "program.json").read_text())
    assert desc["k"] == 3 and desc["label_map"]["pairs"] == [[1, 0], [2, 1]]


def test_attack_blackbox_inproc(workspace, tmp_path, capsys):
    args = _attack_args(workspace, tmp_path / "bb")
    args = ["--oracle", f"inproc:{workspace / 'victim'}"] + args[2:]
    assert main(["attack-blackbox", *args, "--samples", "2", "--topk", "50"]) == 0
    assert _json_out(capsys)["queries"] == 2 * 120 + 40


def test_sweep_k(workspace, tmp_path, capsys):
    assert main(["sweep-k", "--ks", "1,3", *_attack_args(workspace, tmp_path / "sw")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "k,argmax_acc,sampled_acc,error"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "3"]
    assert (tmp_path / "sw" / "sweep.csv").exists()


def test_run_from_config(workspace, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"task": str(workspace / "data" / "adversarial"),
                               "victim": str(workspace / "victim"), "whitebox": {"epochs": 1},
                               "out": str(tmp_path / "r")}))
    assert main(["run", "--config", str(cfg), "--set", "k=1"]) == 0
    _json_out(capsys)
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert rep["config"]["k"] == 1


def test_compile_lookup(workspace, tmp_path, capsys):
    assert main(["attack-whitebox", *_attack_args(workspace, tmp_path / "wb")]) == 0
    capsys.readouterr()
    assert main(["compile-lookup", "--program", str(tmp_path / "wb" / "program"),
                 "--task", str(workspace / "data" / "adversarial"),
                 "--out", str(tmp_path / "table.json"), "--transformed", str(tmp_path / "t.txt")]) == 0
    table = json.loads((tmp_path / "table.json").read_text())
    assert table["k"] == 3 and table["entries"]
    transformed = (tmp_path / "t.txt").read_text().splitlines()
    originals = (workspace / "data" / "adversarial" / "test.tsv").read_text().splitlines()
    assert len(transformed) == len(originals)
    for before, after in zip(originals, transformed):
        assert len(after.split()) == len(before.split("\t")[1].split())


@pytest.mark.parametrize("argv", [
    ["attack-whitebox", "--k", "4"],
    ["train-victim", "--task", "/no/such/task", "--out", "/tmp/never"],
    ["attack-blackbox", "--oracle", "carrier-pigeon:1"],
    ["run", "--config", "/no/such.json"],
    ["serve-oracle", "--victim", "/no/such/victim"],
])
def test_failures_exit_1(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err.startswith("error: [")


def test_compile_lookup_needs_inputs(workspace, tmp_path, capsys):
    assert main(["attack-whitebox", *_attack_args(workspace, tmp_path / "wb")]) == 0
    assert main(["compile-lookup", "--program", str(tmp_path / "wb" / "program"),
                 "--out", str(tmp_path / "x.json")]) == 1
    assert "[config]" in capsys.readouterr().err


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as err:
        main(["no-such-command"])
    assert err.value.code == 2


def test_serve_oracle_and_blackbox_over_tcp(workspace, tmp_path, capsys):
    exe = shutil.which("textreprog")
    cmd = [exe] if exe else [sys.executable, "-m", "textreprog.cli"]
    proc = subprocess.Popen([*cmd, "serve-oracle", "--victim", str(workspace / "victim"), "--port", "0"],
                            stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        assert line.startswith("oracle listening on ")
        host, port = line.split()[-1].rsplit(":", 1)
        remote = TCPOracle(host, int(port))
        assert remote.query([2, 3, 4]) in (0, 1, 2)
        remote.close()
        args = _attack_args(workspace, tmp_path / "tcp")
        assert main(["attack-blackbox", "--oracle", f"tcp:{host}:{port}", *args]) == 0
        assert _json_out(capsys)["queries"] == 120 + 40
    finally:
        proc.terminate()
        proc.wait(timeout=10)
