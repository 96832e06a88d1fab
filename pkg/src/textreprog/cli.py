"""Command-line entry point (``textreprog``).

Every subcommand exits 0 on success; failures print ``error: [stage] ...``
to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .advprog import AdversarialProgram, apply_lookup, compile_lookup
from .harness import ExperimentError
from .synth import SynthSpec, gen_synthetic_pair
from .textdata import Vocab, build_vocab, detokenize, load_task, save_task, task_from_files, tokenize
from .victims import ARCHS, TrainConfig, VictimConfig, load_victim_vocab, train_victim


def _parse_pairs(text):
    """``"1:0,2:1"`` -> ``[[1, 0], [2, 1]]`` (victim label : adversarial label)."""
    if text is None:
        return None
    try:
        return [[int(a), int(b)] for a, b in (item.split(":") for item in text.split(","))]
    except ValueError as err:
        raise ExperimentError("config", f"bad --label-map {text!r}; expected V:A,V:A") from err


def _parse_sets(items):
    out = {}
    for item in items or []:
        key, _, value = item.partition("=")
        if not _:
            raise ExperimentError("config", f"bad --set {item!r}; expected key=value")
        try:
            out[key] = json.loads(value)
        except ValueError:
            out[key] = value
    return out


def _common_attack_args(p):
    p.add_argument("--config", help="JSON experiment config; flags override its values")
    p.add_argument("--task", help="adversarial task directory (default: synthetic pair)")
    p.add_argument("--victim-task", help="original task directory for training a victim")
    p.add_argument("--arch", choices=ARCHS, help="victim architecture when training one")
    p.add_argument("--k", type=int, help="context size (odd)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--label-map", help="victim:adversarial label pairs, e.g. 1:0,2:1")
    p.add_argument("--random-victim", action="store_true", default=None,
                   help="attack an untrained network of the victim's shape")
    p.add_argument("--keep-reserved", action="store_true",
                   help="allow <pad>/<unk> as program outputs")
    p.add_argument("--name")
    p.add_argument("--out", help="output directory")


def _overrides(args, mode, attack):
    return {
        "name": args.name,
        "task": args.task,
        "victim_task": args.victim_task,
        "victim_arch": args.arch,
        "k": args.k,
        "seed": args.seed,
        "mode": mode,
        "label_map": _parse_pairs(args.label_map),
        "random_victim": args.random_victim,
        "mask_reserved": False if args.keep_reserved else None,
        "out": args.out,
        mode: {"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size, **attack},
    }


def _print_report(rep):
    print(json.dumps({
        "argmax_acc": rep.argmax_acc,
        "sampled_acc": rep.sampled_acc,
        "queries": rep.queries,
        "victim_checksum": rep.checksum_after,
        "wall_time": round(rep.wall_time, 2),
        "out": rep.out_dir,
    }, indent=2))


def cmd_gen_synth(args):
    spec = SynthSpec(**_parse_sets(args.set))
    orig, adv = gen_synthetic_pair(spec, args.seed)
    out = Path(args.out)
    save_task(out / "original", orig)
    save_task(out / "adversarial", adv)
    print(f"wrote {out / 'original'} and {out / 'adversarial'}")


def cmd_train_victim(args):
    try:
        if args.task:
            task = load_task(args.task)
        elif args.train and args.test:
            task = task_from_files(args.train, args.test, args.mode, Path(args.train).stem)
        else:
            task, _ = gen_synthetic_pair(SynthSpec(), args.seed)
        vocab = build_vocab(task.train.texts, task.mode, args.max_vocab)
    except (OSError, ValueError) as err:
        raise ExperimentError("data", str(err)) from err
    try:
        vcfg = VictimConfig(args.arch, len(vocab), task.train.n_classes)
        tcfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                           max_len=args.max_len, seed=args.seed)
        result = train_victim(task.train, task.test, vocab, vcfg, tcfg)
    except Exception as err:
        raise ExperimentError("victim", f"{type(err).__name__}: {err}") from err
    result.model.save(args.out, vocab, task.label_names, {"task": task.name, "history": result.history})
    print(json.dumps({"test_accuracy": result.test_accuracy, "checksum": result.model.checksum(),
                      "out": args.out}, indent=2))


def cmd_attack_whitebox(args):
    attack = {"t_max": args.tmax, "t_min": args.tmin}
    over = _overrides(args, "whitebox", attack)
    over["victim"] = args.victim
    _print_report(harness.run_experiment(harness.load_config(args.config, over)))


def cmd_attack_blackbox(args):
    attack = {"top_k": args.topk, "samples_per_input": args.samples,
              "baseline": True if args.baseline else None}
    over = _overrides(args, "blackbox", attack)
    kind, _, rest = (args.oracle or "inproc:").partition(":")
    if kind == "inproc":
        over["victim"] = rest or args.victim
        over["oracle"] = "inproc"
    elif kind == "tcp":
        over["victim"] = args.victim
        over["oracle"] = args.oracle
    else:
        raise ExperimentError("config", f"--oracle must be inproc:CKPT or tcp:HOST:PORT, got {args.oracle!r}")
    _print_report(harness.run_experiment(harness.load_config(args.config, over)))


def cmd_sweep_k(args):
    attack = {"t_max": args.tmax, "t_min": args.tmin} if args.mode == "whitebox" else {}
    over = _overrides(args, args.mode, attack)
    over["victim"] = args.victim
    cfg = harness.load_config(args.config, over)
    ks = [int(k) for k in args.ks.split(",")]
    table = harness.sweep_context(cfg, ks, parallel=args.parallel)
    print("k,argmax_acc,sampled_acc,error")
    for row in table:
        print(f"{row['k']},{row['argmax_acc']},{row['sampled_acc']},{row['error']}")
    if all(row["error"] for row in table):
        raise ExperimentError("attack", "every context size failed")


def cmd_run(args):
    _print_report(harness.run_experiment(harness.load_config(args.config, _parse_sets(args.set))))


def cmd_serve_oracle(args):
    from .oracle import OracleServer
    from .victims import VictimModel

    try:
        victim = VictimModel.load(args.victim)
    except (OSError, ValueError, KeyError) as err:
        raise ExperimentError("victim", f"cannot load victim {args.victim}: {err}") from err
    server = OracleServer(victim, args.host, args.port)
    print(f"oracle listening on {args.host}:{server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def cmd_compile_lookup(args):
    try:
        prog, desc = AdversarialProgram.load(args.program)
        vocab_t = Vocab.from_dict(desc["input_vocab"])
        vocab_s, _ = load_victim_vocab(desc["victim"] if args.victim is None else args.victim)
    except (OSError, ValueError, KeyError) as err:
        raise ExperimentError("data", f"cannot load program or vocabularies: {err}") from err
    table = compile_lookup(prog)
    if args.texts:
        texts = Path(args.texts).read_text(encoding="utf-8").splitlines()
    elif args.task:
        texts = load_task(args.task).test.texts
    else:
        raise ExperimentError("config", "compile-lookup needs --texts or --task to enumerate contexts")
    lines = [detokenize(apply_lookup(table, tokenize(text, vocab_t)), vocab_s) for text in texts]
    payload = table.to_dict()
    payload["input_vocab"] = desc["input_vocab"]
    Path(args.out).write_text(json.dumps(payload))
    if args.transformed:
        Path(args.transformed).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    else:
        for line in lines:
            print(line)
    print(f"{len(table.table)} contexts compiled to {args.out}", file=sys.stderr)


def build_parser():
    parser = argparse.ArgumentParser(prog="textreprog", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write the synthetic original/adversarial task pair")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="SynthSpec override")
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("train-victim", help="train and checkpoint a victim classifier")
    p.add_argument("--arch", choices=ARCHS, default="lstm")
    p.add_argument("--task", help="task directory with task.json")
    p.add_argument("--train", help="train TSV (label<TAB>text)")
    p.add_argument("--test", help="test TSV")
    p.add_argument("--mode", choices=("char", "word"), default="word")
    p.add_argument("--max-vocab", type=int)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-len", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_victim)

    p = sub.add_parser("attack-whitebox", help="Gumbel-Softmax attack through a frozen victim")
    p.add_argument("--victim", help="victim checkpoint (default: train one on the synthetic task)")
    p.add_argument("--tmax", type=float)
    p.add_argument("--tmin", type=float)
    _common_attack_args(p)
    p.set_defaults(fn=cmd_attack_whitebox)

    p = sub.add_parser("attack-blackbox", help="REINFORCE attack against a label-only oracle")
    p.add_argument("--oracle", help="inproc:CKPT or tcp:HOST:PORT (default inproc)")
    p.add_argument("--victim", help="victim checkpoint; with tcp only its vocabulary is read")
    p.add_argument("--topk", type=int)
    p.add_argument("--samples", type=int, help="samples per input")
    p.add_argument("--baseline", action="store_true", help="moving-average reward baseline")
    _common_attack_args(p)
    p.set_defaults(fn=cmd_attack_blackbox)

    p = sub.add_parser("sweep-k", help="accuracy against context size")
    p.add_argument("--ks", default="1,3,5,7")
    p.add_argument("--mode", choices=("whitebox", "blackbox"), default="whitebox")
    p.add_argument("--victim")
    p.add_argument("--tmax", type=float)
    p.add_argument("--tmin", type=float)
    p.add_argument("--parallel", type=int, default=1)
    _common_attack_args(p)
    p.set_defaults(fn=cmd_sweep_k)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="top-level override")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("serve-oracle", help="host a victim as a label-only TCP oracle")
    p.add_argument("--victim", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(fn=cmd_serve_oracle)

    p = sub.add_parser("compile-lookup", help="compile a program to a k-gram lookup table")
    p.add_argument("--program", required=True, help="program directory")
    p.add_argument("--victim", help="victim checkpoint (default: the one recorded in the program)")
    p.add_argument("--texts", help="file of input texts, one per line, to transform")
    p.add_argument("--task", help="task directory; its test split is transformed")
    p.add_argument("--transformed", help="write transformed texts here instead of stdout")
    p.add_argument("--out", required=True, help="lookup table JSON")
    p.set_defaults(fn=cmd_compile_lookup)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ExperimentError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as err:
        print(f"error: [{args.command}] {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
