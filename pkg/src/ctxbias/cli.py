"""Command line entry point: ``ctxbias {synth,pretrain,train,eval,suite}``.

Every subcommand accepts ``--config FILE`` (YAML or JSON) laid out like
``SuiteConfig``: sections ``synth``, ``pretrain`` and ``train`` plus the
top-level keys ``rare_k``, ``sweep``, ``eval_seed`` and ``workers``. Flags given
on the command line override values from the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from ctxbias import checkpoint
from ctxbias.adapter import ContextualTransducer
from ctxbias.biaslist import build_rare_vocab
from ctxbias.harness import (PretrainConfig, SuiteConfig, TrainConfig, evaluate, format_table, pretrain_base, report_record,
                             run_suite, train_adapters, write_suite_outputs)
from ctxbias.synth import SynthConfig, load_corpus, save_corpus, synth_corpus

log = logging.getLogger("ctxbias")

GA_FLAGS = {"none": "none", "ce": "ga_ce", "ctc": "ga_ctc"}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise SystemExit(f"{path}: expected a mapping at the top level")
    return data


def _override(section: dict, args: argparse.Namespace, names: list[str]) -> dict:
    out = dict(section)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def _field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _sweep(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sweep must be comma-separated integers, got {text!r}")


def _load_model(path: str) -> ContextualTransducer:
    return ContextualTransducer.from_state_dict(checkpoint.load(path))


# -- subcommands ------------------------------------------------------------


def cmd_synth(args, cfg: dict) -> int:
    scfg = SynthConfig(**_override(cfg.get("synth", {}), args, _field_names(SynthConfig)))
    corpus = synth_corpus(scfg)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.train)} train / {len(corpus.test)} test utterances to {args.out}")
    return 0


def cmd_pretrain(args, cfg: dict) -> int:
    pcfg = PretrainConfig(**_override(cfg.get("pretrain", {}), args, ["epochs", "lr", "seed"]))
    model, hist = pretrain_base(load_corpus(args.corpus), pcfg)
    checkpoint.save(args.out, model.state_dict())
    print(f"trained {len(hist.epoch_loss)} epochs, final loss {hist.epoch_loss[-1]:.4f}; saved {args.out}")
    return 0


def cmd_train(args, cfg: dict) -> int:
    if args.ga is not None:
        args.ga_mode = GA_FLAGS[args.ga]
    tcfg = TrainConfig(**_override(cfg.get("train", {}), args, _field_names(TrainConfig)))
    corpus = load_corpus(args.corpus)
    rare = build_rare_vocab(corpus.train_frequencies(), args.rare_k if args.rare_k is not None else cfg.get("rare_k", 20))
    model, hist = train_adapters(_load_model(args.base), corpus, rare, tcfg)
    checkpoint.save(args.out, model.state_dict())
    if hist.skipped_ga:
        print(f"skipped the guided-attention term for {hist.skipped_ga} infeasible utterances")
    print(f"final loss {hist.epoch_loss[-1]:.4f}; saved {args.out}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    corpus = load_corpus(args.corpus)
    rare = build_rare_vocab(corpus.train_frequencies(), args.rare_k if args.rare_k is not None else cfg.get("rare_k", 20))
    mode = "vanilla" if args.vanilla else "empty" if args.empty_bias else "bias"
    seed = args.seed if args.seed is not None else cfg.get("eval_seed", 0)
    workers = args.workers if args.workers is not None else cfg.get("workers", 1)
    rep = evaluate(_load_model(args.model), corpus, rare, args.distractors, seed, mode=mode, workers=workers)
    record = report_record(Path(args.model).stem, "empty" if mode == "empty" else args.distractors, rep)
    text = json.dumps(record, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(format_table([record]), end="")
    return 0


def cmd_suite(args, cfg: dict) -> int:
    top = _override({k: v for k, v in cfg.items() if k not in ("synth", "pretrain", "train")}, args,
                    ["sweep", "workers", "rare_k", "eval_seed"])
    suite = SuiteConfig.from_dict({**top, "synth": cfg.get("synth", {}), "pretrain": cfg.get("pretrain", {}),
                                   "train": cfg.get("train", {})})
    out = Path(args.out)
    result = run_suite(suite)
    write_suite_outputs(out, result)
    (out / "config.json").write_text(json.dumps(suite.to_dict(), indent=2, sort_keys=True) + "\n")
    print(format_table([result["baseline"]] + result["conditions"]), end="")
    log.info("suite finished in %.0f s", result["seconds"])
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxbias", description="Contextual biasing adapters for a toy transducer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="YAML/JSON configuration file")
        return sp

    s = add("synth", "generate a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--vocab-size", dest="vocab_size", type=int)
    s.add_argument("--frames-per-token", dest="frames_per_token", type=int)
    s.add_argument("--feature-dim", dest="feature_dim", type=int)
    s.add_argument("--noise-std", dest="noise_std", type=float)
    s.add_argument("--n-train", dest="n_train", type=int)
    s.add_argument("--n-test", dest="n_test", type=int)
    s.add_argument("--zipf-exponent", dest="zipf_exponent", type=float)

    s = add("pretrain", "train the base transducer without adapters")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)

    s = add("train", "train catalog encoder and biasing adapters on a base checkpoint")
    s.add_argument("--corpus", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ga", choices=sorted(GA_FLAGS))
    s.add_argument("--alpha", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--freeze-base", dest="freeze_base", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--force-align", dest="force_align", action=argparse.BooleanOptionalAction, default=None,
                   help="frame labels from CTC forced alignment instead of generator spans")
    s.add_argument("--empty-list-prob", dest="empty_list_prob", type=float,
                   help="chance that a batch trains on the <no_bias>-only list")
    s.add_argument("--rare-k", dest="rare_k", type=int)

    s = add("eval", "decode the test split and report WER / U-WER / B-WER")
    s.add_argument("--corpus", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--distractors", type=int, default=0)
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--empty-bias", action="store_true", help="bias list holding only <no_bias>")
    mode.add_argument("--vanilla", action="store_true", help="bypass the adapters entirely")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--rare-k", dest="rare_k", type=int)
    s.add_argument("--out", help="write the report record as JSON")

    s = add("suite", "pretrain, train all three systems and run the distractor sweep")
    s.add_argument("--out", required=True)
    s.add_argument("--sweep", type=_sweep)
    s.add_argument("--workers", type=int)
    s.add_argument("--rare-k", dest="rare_k", type=int)
    s.add_argument("--eval-seed", dest="eval_seed", type=int)
    return p


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval, "suite": cmd_suite}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ValueError, TypeError, FileNotFoundError) as err:
        print(f"ctxbias {args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
