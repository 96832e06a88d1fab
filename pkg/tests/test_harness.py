import csv
import json
import socket

import pytest

from textreprog.harness import (
    OUT_ENV,
    ExperimentConfig,
    ExperimentError,
    RunReport,
    export_report,
    load_config,
    load_report,
    run_experiment,
    sweep_context,
)
from textreprog.oracle import serve_in_thread
from textreprog.victims import VictimModel

TINY = {"orig_train": 300, "orig_test": 60, "adv_train": 120, "adv_test": 40}


def _cfg(tmp_path, **kw):
    base = dict(synth=TINY, victim_train={"epochs": 2}, whitebox={"epochs": 2}, blackbox={"epochs": 2},
                out=str(tmp_path / "run"))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.mark.parametrize("kw", [
    {"k": 4}, {"k": 0}, {"mode": "greybox"}, {"oracle": "udp:x"},
    {"oracle": "tcp:127.0.0.1:1"}, {"whitebox": {"nonsense": 1}}, {"victim": "/no/such/dir"},
])
def test_config_validation(kw):
    with pytest.raises(ExperimentError) as err:
        ExperimentConfig(**kw).validate()
    assert err.value.stage == "config"
    assert str(err.value).startswith("[config] ")


def test_load_config_merges_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"k": 3, "whitebox": {"epochs": 4, "lr": 0.2}}))
    cfg = load_config(path, {"k": None, "whitebox": {"epochs": 9, "lr": None}, "seed": 5})
    assert cfg.k == 3 and cfg.seed == 5
    assert cfg.whitebox == {"epochs": 9, "lr": 0.2}


def test_load_config_errors(tmp_path):
    with pytest.raises(ExperimentError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "blue"}))
    with pytest.raises(ExperimentError, match="unknown config key"):
        load_config(bad)


def test_out_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    assert ExperimentConfig(name="x").out_dir() == tmp_path / "x"
    monkeypatch.delenv(OUT_ENV)
    assert str(ExperimentConfig(name="x").out_dir()) == "runs/x"


@pytest.fixture(scope="module")
def whitebox_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("wb")
    return tmp, run_experiment(_cfg(tmp))


def test_whitebox_run_outputs(whitebox_run):
    tmp, rep = whitebox_run
    out = tmp / "run"
    assert rep.checksum_before == rep.checksum_after != ""
    assert 0 <= rep.argmax_acc <= 1 and rep.victim_accuracy is not None
    with (out / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert list(rows[0]) == ["epoch", "temp", "loss", "sampled_acc", "argmax_acc"]
    assert (out / "program" / "program.json").exists()
    assert VictimModel.load(out / "victim").checksum() == rep.checksum_before
    desc = json.loads((out / "program" / "program.json").read_text())
    assert desc["label_map"]["pairs"] == [[1, 0], [2, 1]]


def test_report_json_round_trip(whitebox_run, tmp_path):
    _, rep = whitebox_run
    path = export_report(rep, tmp_path, "json")
    assert load_report(path) == RunReport(**json.loads(json.dumps(rep.to_dict())))
    with pytest.raises(ExperimentError):
        export_report(rep, tmp_path, "xml")


def test_run_is_deterministic(whitebox_run, tmp_path):
    _, rep = whitebox_run
    again = run_experiment(_cfg(tmp_path))
    assert again.rows == rep.rows
    assert again.checksum_before == rep.checksum_before


def test_random_victim_run(whitebox_run, tmp_path):
    tmp, rep = whitebox_run
    r = run_experiment(_cfg(tmp_path, victim=str(tmp / "run" / "victim"), random_victim=True))
    assert r.checksum_before == r.checksum_after != rep.checksum_before


def test_blackbox_run_over_tcp(whitebox_run, tmp_path):
    tmp, _ = whitebox_run
    victim_dir = tmp / "run" / "victim"
    srv = serve_in_thread(VictimModel.load(victim_dir))
    try:
        cfg = _cfg(tmp_path, mode="blackbox", victim=str(victim_dir), oracle=f"tcp:127.0.0.1:{srv.port}")
        rep = run_experiment(cfg)
    finally:
        srv.shutdown()
        srv.server_close()
    assert rep.queries == 2 * TINY["adv_train"] + 2 * TINY["adv_test"]
    assert rep.checksum_before == ""  # the trainer never saw the victim
    assert rep.rows[-1]["queries"] == 2 * TINY["adv_train"]


def test_stage_tagged_errors(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ExperimentError) as err:
        run_experiment(_cfg(tmp_path, task=str(empty)))
    assert err.value.stage == "data"
    with pytest.raises(ExperimentError) as err:
        run_experiment(_cfg(tmp_path, victim=str(empty)))
    assert err.value.stage == "victim"


def _closed_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_sweep_table(whitebox_run, tmp_path):
    tmp, _ = whitebox_run
    cfg = _cfg(tmp_path, victim=str(tmp / "run" / "victim"), whitebox={"epochs": 1})
    table = sweep_context(cfg, [1, 3])
    assert [r["k"] for r in table] == [1, 3]
    assert all(r["error"] == "" and 0 <= r["argmax_acc"] <= 1 for r in table)
    with (tmp_path / "run" / "sweep.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 2
    with pytest.raises(ExperimentError):
        sweep_context(cfg, [2])


def test_sweep_keeps_failed_points(whitebox_run, tmp_path):
    tmp, _ = whitebox_run
    cfg = _cfg(tmp_path, mode="blackbox", victim=str(tmp / "run" / "victim"),
               oracle=f"tcp:127.0.0.1:{_closed_port()}")
    table = sweep_context(cfg, [1, 3])
    assert len(table) == 2
    assert all(r["argmax_acc"] is None and "[attack]" in r["error"] for r in table)
