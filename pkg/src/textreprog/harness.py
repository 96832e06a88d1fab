"""Experiment orchestration: configs, end-to-end runs, k sweeps and reports.

A run is described by an :class:`ExperimentConfig` (JSON on disk, see
``CONFIG_FIELDS``). :func:`run_experiment` resolves the tasks, trains or
loads the victim, runs the chosen attack and returns a :class:`RunReport`.
Any failure is raised as :class:`ExperimentError` tagged with the stage it
happened in.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .advprog import AdversarialProgram, LabelMap, reserved_mask
from .blackbox import ReinforceConfig, topk_mask, train_blackbox
from .oracle import LocalOracle, TCPOracle
from .synth import SynthSpec, default_label_map, gen_synthetic_pair
from .textdata import build_vocab, load_task
from .victims import (TrainConfig, VictimConfig, VictimModel, load_victim_vocab, random_network,
                      train_victim)
from .whitebox import WhiteboxConfig, train_whitebox

log = logging.getLogger(__name__)

OUT_ENV = "TEXTREPROG_OUT"
STAGES = ("config", "data", "victim", "attack", "report")

CONFIG_FIELDS = {
    "name": "run name, used for the output subdirectory",
    "task": "adversarial task directory (TSV + task.json); null for the synthetic pair",
    "victim_task": "original task directory used to train a victim; null for the synthetic pair",
    "synth": "SynthSpec overrides for the synthetic pair",
    "synth_seed": "seed for the synthetic generator",
    "victim": "victim checkpoint directory; null trains a fresh one",
    "victim_arch": "lstm | bilstm | cnn | cnn1 (only when training)",
    "victim_train": "TrainConfig overrides (epochs, lr, batch_size, max_len, seed)",
    "random_victim": "attack an untrained network of the same shape instead",
    "mode": "whitebox | blackbox",
    "k": "context size (odd)",
    "label_map": "list of [victim_label, adversarial_label] pairs; null means the synthetic default "
                 "for the synthetic bigram task and identity otherwise",
    "mask_reserved": "forbid <pad>/<unk> as program outputs",
    "whitebox": "WhiteboxConfig overrides",
    "blackbox": "ReinforceConfig overrides",
    "oracle": "inproc | tcp:HOST:PORT (blackbox only)",
    "seed": "seed for program initialisation and the attack",
    "out": "output directory; null means $TEXTREPROG_OUT/<name> (default ./runs/<name>)",
}


class ExperimentError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    name: str = "synthetic"
    task: str = None
    victim_task: str = None
    synth: dict = field(default_factory=dict)
    synth_seed: int = 0
    victim: str = None
    victim_arch: str = "lstm"
    victim_train: dict = field(default_factory=dict)
    random_victim: bool = False
    mode: str = "whitebox"
    k: int = 5
    label_map: list = None
    mask_reserved: bool = True
    whitebox: dict = field(default_factory=dict)
    blackbox: dict = field(default_factory=dict)
    oracle: str = "inproc"
    seed: int = 0
    out: str = None

    def validate(self):
        if self.mode not in ("whitebox", "blackbox"):
            raise ExperimentError("config", f"mode must be whitebox or blackbox, got {self.mode!r}")
        if self.k < 1 or self.k % 2 == 0:
            raise ExperimentError("config", f"k must be odd and >= 1, got {self.k}")
        if self.oracle != "inproc" and not self.oracle.startswith("tcp:"):
            raise ExperimentError("config", f"oracle must be inproc or tcp:HOST:PORT, got {self.oracle!r}")
        if self.oracle != "inproc" and self.mode != "blackbox":
            raise ExperimentError("config", "a remote oracle only makes sense for blackbox runs")
        if self.oracle != "inproc" and self.victim is None:
            raise ExperimentError("config", "a remote oracle needs --victim for the victim vocabulary")
        for key in ("task", "victim_task", "victim"):
            path = getattr(self, key)
            if path is not None and not Path(path).is_dir():
                raise ExperimentError("config", f"{key} directory not found: {path}")
        for key, cls in (("whitebox", WhiteboxConfig), ("blackbox", ReinforceConfig),
                         ("victim_train", TrainConfig), ("synth", SynthSpec)):
            known = {f.name for f in fields(cls)}
            unknown = set(getattr(self, key)) - known
            if unknown:
                raise ExperimentError("config", f"unknown {key} option(s): {sorted(unknown)}")
        return self

    def out_dir(self):
        if self.out:
            return Path(self.out)
        return Path(os.environ.get(OUT_ENV, "runs")) / self.name


def load_config(path=None, overrides=None):
    """Read a JSON config (or start from defaults) and apply ``overrides``.

    Override values of None are ignored so unset CLI flags leave the file alone.
    """
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as err:
            raise ExperimentError("config", f"cannot read config {path}: {err}") from err
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if isinstance(value, dict):
            data[key] = {**data.get(key, {}), **{k: v for k, v in value.items() if v is not None}}
        else:
            data[key] = value
    unknown = set(data) - {f.name for f in fields(ExperimentConfig)}
    if unknown:
        raise ExperimentError("config", f"unknown config key(s): {sorted(unknown)}")
    try:
        cfg = ExperimentConfig(**data)
    except TypeError as err:
        raise ExperimentError("config", str(err)) from err
    return cfg.validate()


@dataclass
class RunReport:
    config: dict
    rows: list
    argmax_acc: float
    sampled_acc: float
    checksum_before: str
    checksum_after: str
    queries: int = 0
    wall_time: float = 0.0
    victim_accuracy: float = None
    out_dir: str = None

    def to_dict(self):
        return asdict(self)


def _stage(stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ExperimentError:
        raise
    except Exception as err:  # any module error is reported with its stage
        raise ExperimentError(stage, f"{type(err).__name__}: {err}") from err


def resolve_tasks(cfg):
    """``(original Task or None, adversarial Task)`` for a config."""
    if cfg.task is None:
        orig, adv = gen_synthetic_pair(SynthSpec(**cfg.synth), cfg.synth_seed)
        return orig, adv
    adv = load_task(cfg.task)
    orig = load_task(cfg.victim_task) if cfg.victim_task else None
    return orig, adv


def prepare_victim(cfg, orig, out):
    """Load or train the victim; returns ``(model, vocab, label_names, test_acc)``."""
    if cfg.victim is not None:
        model = VictimModel.load(cfg.victim)
        vocab, labels = load_victim_vocab(cfg.victim)
        return model, vocab, labels, None
    if orig is None:
        raise ExperimentError("victim", "no victim checkpoint and no original task to train one on")
    vocab = build_vocab(orig.train.texts, orig.mode)
    vcfg = VictimConfig(cfg.victim_arch, len(vocab), orig.train.n_classes)
    result = train_victim(orig.train, orig.test, vocab, vcfg, TrainConfig(**cfg.victim_train))
    path = out / "victim"
    result.model.save(path, vocab, orig.label_names, {"task": orig.name})
    return result.model, vocab, orig.label_names, result.test_accuracy


def _label_map(cfg, adv, n_orig):
    n_adv = adv.train.n_classes
    if cfg.label_map is not None:
        return LabelMap(tuple(tuple(p) for p in cfg.label_map), n_orig, n_adv)
    if adv.meta.get("generator") == "synthetic" and adv.name == "synth-bigrams":
        return default_label_map()
    return LabelMap.identity(n_orig, n_adv)


def _program_mask(cfg, vocab):
    mask = reserved_mask(len(vocab)) if cfg.mask_reserved else np.ones(len(vocab), dtype=bool)
    if cfg.mode == "blackbox":
        top = topk_mask(vocab, ReinforceConfig(**cfg.blackbox).top_k)
        if top is not None:
            mask &= top
    return mask


def _open_oracle(cfg, victim):
    if cfg.oracle == "inproc":
        return LocalOracle(victim)
    try:
        _, host, port = cfg.oracle.split(":")
        return TCPOracle(host, int(port))
    except ValueError as err:
        raise ExperimentError("config", f"bad oracle address {cfg.oracle!r}") from err


def run_experiment(cfg):
    """Run one attack end to end and write its report into ``cfg.out_dir()``."""
    start = time.perf_counter()
    cfg = _stage("config", cfg.validate)
    out = cfg.out_dir()
    _stage("config", out.mkdir, parents=True, exist_ok=True)
    orig, adv = _stage("data", resolve_tasks, cfg)
    remote = cfg.oracle != "inproc"
    if remote:
        victim = None
        vocab_s, victim_labels = _stage("victim", load_victim_vocab, cfg.victim)
        victim_acc = None
    else:
        victim, vocab_s, victim_labels, victim_acc = _stage("victim", prepare_victim, cfg, orig, out)
        if cfg.random_victim:
            victim = random_network(victim.cfg, cfg.seed + 1)
    before = victim.checksum() if victim is not None else ""
    vocab_t = _stage("data", build_vocab, adv.train.texts, adv.mode)
    lmap = _stage("config", _label_map, cfg, adv, len(victim_labels))

    def attack():
        prog = AdversarialProgram.init(cfg.k, len(vocab_t), len(vocab_s), seed=cfg.seed)
        prog.set_mask(_program_mask(cfg, vocab_s))
        if cfg.mode == "whitebox":
            wcfg = WhiteboxConfig(**{"seed": cfg.seed, **cfg.whitebox})
            return train_whitebox(wcfg, prog, victim, lmap, adv.train, adv.test, vocab_t)
        oracle = _open_oracle(cfg, victim)
        try:
            bcfg = ReinforceConfig(**{"seed": cfg.seed, **cfg.blackbox})
            return train_blackbox(bcfg, prog, oracle, lmap, adv.train, adv.test, vocab_t)
        finally:
            if isinstance(oracle, TCPOracle):
                oracle.close()

    result = _stage("attack", attack)
    after = victim.checksum() if victim is not None else ""
    if before != after:
        raise ExperimentError("attack", "victim parameters changed during the attack")
    report = RunReport(
        config=asdict(cfg),
        rows=result.rows,
        argmax_acc=result.argmax_acc,
        sampled_acc=result.sampled_acc,
        checksum_before=before,
        checksum_after=after,
        queries=result.queries,
        wall_time=time.perf_counter() - start,
        victim_accuracy=victim_acc,
        out_dir=str(out),
    )

    def write():
        result.program.save(out / "program", {
            "label_map": lmap.to_dict(),
            "input_vocab": vocab_t.to_dict(),
            "victim": cfg.victim or str(out / "victim"),
        })
        export_report(report, out, "csv")
        export_report(report, out, "json")

    _stage("report", write)
    log.info("%s: argmax acc %.4f in %.1fs", cfg.name, report.argmax_acc, report.wall_time)
    return report


def export_report(report, directory, fmt):
    """Write ``metrics.csv`` (one row per epoch or eval step) or ``report.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = directory / "metrics.csv"
        header = list(report.rows[0]) if report.rows else []
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=header)
            writer.writeheader()
            writer.writerows(report.rows)
        return path
    if fmt == "json":
        path = directory / "report.json"
        path.write_text(json.dumps(report.to_dict(), indent=2))
        return path
    raise ExperimentError("report", f"unknown report format {fmt!r}")


def load_report(path):
    return RunReport(**json.loads(Path(path).read_text()))


def _sweep_point(cfg):
    try:
        rep = run_experiment(cfg)
        return {"k": cfg.k, "argmax_acc": rep.argmax_acc, "sampled_acc": rep.sampled_acc, "error": ""}
    except ExperimentError as err:
        log.warning("k=%d failed: %s", cfg.k, err)
        return {"k": cfg.k, "argmax_acc": None, "sampled_acc": None, "error": str(err)}


def sweep_context(cfg, ks, parallel=1):
    """Independent runs over context sizes ``ks`` with shared seeds.

    The victim is trained once and reused. Returns rows of
    ``{"k", "argmax_acc", "sampled_acc", "error"}``; a failed k keeps its row
    with ``error`` set and accuracies None. Writes ``sweep.csv``.
    """
    cfg = cfg.validate()
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    bad = [k for k in ks if k < 1 or k % 2 == 0]
    if bad:
        raise ExperimentError("config", f"context sizes must be odd and >= 1: {bad}")
    if cfg.victim is None and cfg.oracle == "inproc":
        orig, _ = _stage("data", resolve_tasks, cfg)
        _stage("victim", prepare_victim, cfg, orig, out)
        cfg = replace(cfg, victim=str(out / "victim"))

    subs = [replace(cfg, k=k, name=f"{cfg.name}-k{k}", out=str(out / f"k{k}")) for k in ks]
    if parallel > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(parallel) as pool:
            table = list(pool.map(_sweep_point, subs))
    else:
        table = [_sweep_point(sub) for sub in subs]
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["k", "argmax_acc", "sampled_acc", "error"])
        writer.writeheader()
        writer.writerows(table)
    return table


def cnn1_baseline(cfg, epochs=10):
    """Train the 1-layer mean-pooled CNN directly on the adversarial task."""
    _, adv = resolve_tasks(cfg)
    vocab = build_vocab(adv.train.texts, adv.mode)
    vcfg = VictimConfig("cnn1", len(vocab), adv.train.n_classes)
    tcfg = TrainConfig(**{**cfg.victim_train, "epochs": epochs})
    return train_victim(adv.train, adv.test, vocab, vcfg, tcfg).test_accuracy
