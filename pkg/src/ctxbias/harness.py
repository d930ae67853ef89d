"""Pretraining, adapter training, evaluation and the distractor sweep."""

from __future__ import annotations

import concurrent.futures as cf
import json
import logging
import math
import multiprocessing as mp
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ctxbias import checkpoint
from ctxbias import tensor as tn
from ctxbias.adapter import ContextualTransducer, ModelConfig, phrase_ids
from ctxbias.biaslist import BiasList, RareVocab, build_rare_vocab, empty_bias_list, eval_bias_list, training_bias_list
from ctxbias.guided import (build_ctc_labels, build_frame_labels, build_text_labels, combined_objective,
                            ga_ce_loss, ga_ctc_loss)
from ctxbias.losses import CtcLattice, InfeasibleAlignmentError, ctc_forced_align, ctc_loss, transducer_loss
from ctxbias.metrics import EvalReport, aggregate, wer_breakdown
from ctxbias.synth import Corpus, SynthConfig, Utterance, synth_corpus
from ctxbias.tensor import Tensor

log = logging.getLogger(__name__)

GA_MODES = ("none", "ga_ce", "ga_ctc")
SYSTEM_NAMES = {"none": "CA", "ga_ce": "CA+GA-CE", "ga_ctc": "CA+GA-CTC"}


class DivergenceError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    lr: float = 3e-3
    epochs: int = 40
    batch_size: int = 8
    loss_threshold: float = 0.05  # mean per-token transducer loss
    ctc_epochs: int = 5
    resample_noise: bool = True
    embed_dim: int = 64
    n_heads: int = 4
    joint_dim: int = 64
    catalog_hidden: int = 32
    seed: int = 0


@dataclass
class TrainConfig:
    alpha: float = 0.5
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    ga_mode: str = "none"
    freeze_base: bool = True
    force_align: bool = False
    resample_noise: bool = True
    empty_list_prob: float = 0.0  # chance a batch sees only <no_bias>
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.empty_list_prob <= 1.0:
            raise ValueError("empty_list_prob must lie in [0, 1]")
        if self.ga_mode not in GA_MODES:
            raise ValueError(f"ga_mode must be one of {GA_MODES}, got {self.ga_mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_transducer: list[float] = field(default_factory=list)
    epoch_ga: list[float] = field(default_factory=list)
    skipped_ga: int = 0


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _epoch_features(corpus: Corpus, enabled: bool, seed: int, epoch: int) -> list[Tensor]:
    """Training features for one epoch; with ``enabled`` every utterance gets fresh noise."""
    if not enabled:
        return [Tensor(u.features) for u in corpus.train]
    rng = np.random.default_rng([seed, 5, epoch])
    return [Tensor(corpus.renoised_features(u, rng)) for u in corpus.train]


def _check_finite(value: float, what: str, seed: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} diverged (loss={value}) with seed {seed}")


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain_base(corpus: Corpus, cfg: PretrainConfig) -> tuple[ContextualTransducer, TrainLog]:
    """Train the adapter-free transducer, then fit the auxiliary CTC head on the frozen encoder."""
    mcfg = ModelConfig(vocab_size=len(corpus.vocab), feature_dim=corpus.config.feature_dim,
                       embed_dim=cfg.embed_dim, n_heads=cfg.n_heads, joint_dim=cfg.joint_dim,
                       catalog_hidden=cfg.catalog_hidden, seed=cfg.seed)
    model = ContextualTransducer(mcfg)
    base = [n for n in model.names("base") if not n.startswith("ctc.")]
    model.set_trainable(base)
    opt = tn.Adam({n: model.params[n] for n in base}, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    labels = [corpus.vocab.encode(u.words) for u in corpus.train]
    history = TrainLog()
    for epoch in range(cfg.epochs):
        feats_all = _epoch_features(corpus, cfg.resample_noise, cfg.seed, epoch)
        total, tokens = 0.0, 0
        for idx in _batches(len(labels), cfg.batch_size, rng):
            opt.zero_grad()
            losses = []
            for i in idx:
                feats, ys = feats_all[i], labels[i]
                losses.append(transducer_loss(model.forward(feats, ys).lattice))
                tokens += len(ys)
            batch = tn.scale(tn.add_n(losses), 1.0 / len(idx))
            batch.backward()
            opt.step()
            total += sum(l.item() for l in losses)
        per_token = total / max(tokens, 1)
        _check_finite(per_token, "pretraining", cfg.seed)
        history.epoch_loss.append(per_token)
        log.info("pretrain epoch %d: loss/token %.4f", epoch + 1, per_token)
        if per_token < cfg.loss_threshold:
            break
    fit_ctc_head(model, corpus, cfg)
    model.set_trainable([])
    return model, history


def fit_ctc_head(model: ContextualTransducer, corpus: Corpus, cfg: PretrainConfig) -> None:
    """Frame-level CTC projection on top of the frozen encoder (used only for forced alignment)."""
    names = ["ctc.b", "ctc.w"]
    model.set_trainable(names)
    opt = tn.Adam({n: model.params[n] for n in names}, lr=cfg.lr)
    with tn.no_grad():
        encs = [Tensor(model.encode(Tensor(u.features)).data) for u in corpus.train]
    labels = [corpus.vocab.encode(u.words) for u in corpus.train]
    rng = np.random.default_rng([cfg.seed, 3])
    for _ in range(cfg.ctc_epochs):
        for idx in _batches(len(encs), cfg.batch_size, rng):
            opt.zero_grad()
            losses = [ctc_loss(CtcLattice(model.ctc_log_probs(encs[i]), labels[i])) for i in idx]
            tn.scale(tn.add_n(losses), 1.0 / len(idx)).backward()
            opt.step()


# ---------------------------------------------------------------------------
# adapter training
# ---------------------------------------------------------------------------


def frame_alignment(model: ContextualTransducer, utt: Utterance, token_ids: Sequence[int], force_align: bool) -> list[int]:
    if not force_align:
        return list(utt.alignment)
    with tn.no_grad():
        lp = model.ctc_log_probs(model.encode(Tensor(utt.features)))
    return ctc_forced_align(CtcLattice(lp, token_ids))


def train_adapters(base: ContextualTransducer, corpus: Corpus, rare: RareVocab,
                   cfg: TrainConfig) -> tuple[ContextualTransducer, TrainLog]:
    """Train catalog encoder and both biasing adapters on top of ``base`` (which is copied)."""
    model = ContextualTransducer.from_state_dict(base.state_dict())
    model.reset_adapters(cfg.seed)
    trainable = model.names("adapter") if cfg.freeze_base else model.names("adapter") + [
        n for n in model.names("base") if not n.startswith("ctc.")]
    model.set_trainable(trainable)
    opt = tn.Adam({n: model.params[n] for n in trainable}, lr=cfg.lr)
    vocab = corpus.vocab
    rng = np.random.default_rng([cfg.seed, 4])
    utts = corpus.train
    labels = [vocab.encode(u.words) for u in utts]
    alignments = [frame_alignment(base, u, ys, cfg.force_align) for u, ys in zip(utts, labels)]
    history = TrainLog()
    dec_cache = None
    if cfg.freeze_base:
        # the frozen prediction network only ever sees the fixed transcripts
        with tn.no_grad():
            dec_cache = [model.predict(ys) for ys in labels]
    for epoch in range(cfg.epochs):
        feats_all = _epoch_features(corpus, cfg.resample_noise, cfg.seed + 7919, epoch)
        tot = tot_tr = tot_ga = 0.0
        n_utt = 0
        for idx in _batches(len(utts), cfg.batch_size, rng):
            bias = training_bias_list([utts[i].words for i in idx], rare)
            if cfg.empty_list_prob and rng.random() < cfg.empty_list_prob:
                bias = empty_bias_list()
            opt.zero_grad()
            P = model.encode_catalog(phrase_ids(bias, vocab))
            losses = []
            for i in idx:
                feats, ys = feats_all[i], labels[i]
                if dec_cache is None:
                    out = model.forward(feats, ys, P=P)
                else:
                    with tn.no_grad():
                        enc = model.encode(feats)
                    out = model.forward_from(enc, dec_cache[i], ys, P=P)
                l_tr = transducer_loss(out.lattice)
                loss = l_tr
                if cfg.ga_mode != "none":
                    c_dec = build_text_labels(utts[i].words, bias)
                    # decoder rows 1..U are the states after consuming each token
                    A_dec = tn.take_rows(out.attn_dec.A, range(1, len(ys) + 1))
                    try:
                        if cfg.ga_mode == "ga_ce":
                            c_enc = build_frame_labels(alignments[i], c_dec, ys)
                            l_ga = ga_ce_loss(out.attn_enc.A, c_enc, A_dec, c_dec)
                        else:
                            l_ga = ga_ctc_loss(out.attn_enc.A, A_dec, build_ctc_labels(c_dec))
                    except InfeasibleAlignmentError as err:
                        history.skipped_ga += 1
                        log.warning("skipping GA term for %s: %s", utts[i].uid, err)
                    else:
                        loss = combined_objective(l_tr, l_ga, cfg.alpha)
                        tot_ga += l_ga.item()
                losses.append(loss)
                tot += loss.item()
                tot_tr += l_tr.item()
                n_utt += 1
            tn.scale(tn.add_n(losses), 1.0 / len(idx)).backward()
            opt.step()
        _check_finite(tot, "adapter training", cfg.seed)
        history.epoch_loss.append(tot / n_utt)
        history.epoch_transducer.append(tot_tr / n_utt)
        history.epoch_ga.append(tot_ga / n_utt)
        log.info("adapter[%s] epoch %d: loss %.4f transducer %.4f ga %.4f", cfg.ga_mode, epoch + 1,
                 tot / n_utt, tot_tr / n_utt, tot_ga / n_utt)
    model.set_trainable([])
    return model, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

_WORKER: dict = {}


def utterance_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _eval_one(model: ContextualTransducer, corpus: Corpus, rare: RareVocab, mode: str, n: int, seed: int,
              i: int, max_symbols: int) -> EvalReport:
    utt = corpus.test[i]
    rare_here = {w for w in utt.words if w in rare.rare_words}
    if mode == "vanilla":
        phrases, scored = None, rare_here
    elif mode == "empty":
        phrases, scored = [], rare_here
    else:
        bias = eval_bias_list(utt.words, rare, n, utterance_seed(seed, i))
        phrases, scored = phrase_ids(bias, corpus.vocab), bias.words()
    hyp = model.greedy_decode(Tensor(utt.features), phrases, max_symbols)
    return wer_breakdown(utt.words, corpus.vocab.decode(hyp), scored)


def _worker_init(state, corpus, rare):
    _WORKER["model"] = ContextualTransducer.from_state_dict(state)
    _WORKER["corpus"] = corpus
    _WORKER["rare"] = rare


def _worker_chunk(args):
    mode, n, seed, indices, max_symbols = args
    return [_eval_one(_WORKER["model"], _WORKER["corpus"], _WORKER["rare"], mode, n, seed, i, max_symbols)
            for i in indices]


def evaluate(model: ContextualTransducer, corpus: Corpus, rare: RareVocab, n_distractors: int = 0, seed: int = 0,
             mode: str = "bias", workers: int = 1, max_symbols: int = 5) -> EvalReport:
    """Decode the test split and score it.

    ``mode`` is ``"bias"`` (utterance rare words + distractors), ``"empty"``
    (only ``<no_bias>``) or ``"vanilla"`` (adapters bypassed). For the last
    two, B-WER is measured over the utterance's rare words.
    """
    if mode not in ("bias", "empty", "vanilla"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    idx = list(range(len(corpus.test)))
    if workers <= 1:
        reports = [_eval_one(model, corpus, rare, mode, n_distractors, seed, i, max_symbols) for i in idx]
    else:
        chunks = [idx[k::workers] for k in range(workers)]
        ctx = mp.get_context("fork")
        with cf.ProcessPoolExecutor(workers, mp_context=ctx, initializer=_worker_init,
                                    initargs=(model.state_dict(), corpus, rare)) as pool:
            parts = list(pool.map(_worker_chunk, [(mode, n_distractors, seed, c, max_symbols) for c in chunks]))
        by_index = {}
        for chunk, reps in zip(chunks, parts):
            by_index.update(zip(chunk, reps))
        reports = [by_index[i] for i in idx]
    return aggregate(reports)


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------


@dataclass
class SuiteConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rare_k: int = 20
    sweep: list[int] = field(default_factory=lambda: [0, 5, 20, 50, 100])
    eval_seed: int = 0
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        d = dict(d)
        return cls(synth=SynthConfig(**d.pop("synth", {})), pretrain=PretrainConfig(**d.pop("pretrain", {})),
                   train=TrainConfig(**d.pop("train", {})), **d)

    def to_dict(self) -> dict:
        return asdict(self)


def report_record(system: str, condition, rep: EvalReport) -> dict:
    rec = {"system": system, "N": condition, "WER": rep.wer, "U-WER": rep.u_wer, "B-WER": rep.b_wer}
    rec.update(rep.to_dict())
    return rec


def format_table(records: Sequence[dict]) -> str:
    lines = [f"{'system':<12} {'N':>6} {'WER':>7} {'U-WER':>7} {'B-WER':>7}"]
    for r in records:
        lines.append(f"{r['system']:<12} {str(r['N']):>6} {100 * r['WER']:7.2f} {100 * r['U-WER']:7.2f} "
                     f"{100 * r['B-WER']:7.2f}")
    return "\n".join(lines) + "\n"


def run_suite(cfg: SuiteConfig, out_dir: str | Path | None = None, corpus: Corpus | None = None,
              base: ContextualTransducer | None = None) -> dict:
    """Train CA, CA+GA-CE and CA+GA-CTC on a shared base and evaluate over the distractor sweep."""
    t0 = time.time()
    corpus = corpus or synth_corpus(cfg.synth)
    rare = build_rare_vocab(corpus.train_frequencies(), cfg.rare_k)
    if base is None:
        base, _ = pretrain_base(corpus, cfg.pretrain)
    vanilla = evaluate(base, corpus, rare, mode="vanilla", workers=cfg.workers)
    baseline = report_record("Transducer", 0, vanilla)
    records, logs = [], {}
    models = {}
    for mode in GA_MODES:
        tcfg = TrainConfig(**{**asdict(cfg.train), "ga_mode": mode})
        model, hist = train_adapters(base, corpus, rare, tcfg)
        models[mode] = model
        logs[SYSTEM_NAMES[mode]] = asdict(hist)
        for n in cfg.sweep:
            rep = evaluate(model, corpus, rare, n, cfg.eval_seed, workers=cfg.workers)
            records.append(report_record(SYSTEM_NAMES[mode], n, rep))
        rep = evaluate(model, corpus, rare, mode="empty", workers=cfg.workers)
        records.append(report_record(SYSTEM_NAMES[mode], "empty", rep))
    result = {"baseline": baseline, "conditions": records, "train_logs": logs,
              "seconds": time.time() - t0, "models": models, "base": base, "corpus": corpus}
    if out_dir is not None:
        write_suite_outputs(out_dir, result)
    return result


def write_suite_outputs(out_dir: str | Path, result: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.jsonl", "w") as fh:
        for rec in result["conditions"]:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "baseline.json").write_text(json.dumps(result["baseline"], sort_keys=True, indent=2) + "\n")
    with open(out / "plot_data.tsv", "w") as fh:
        fh.write("system\tN\tB-WER\n")
        for rec in result["conditions"]:
            if rec["N"] != "empty":
                fh.write(f"{rec['system']}\t{rec['N']}\t{rec['B-WER']!r}\n")
    (out / "table.txt").write_text(format_table([result["baseline"]] + result["conditions"]))
    (out / "train_logs.json").write_text(json.dumps(result["train_logs"], sort_keys=True, indent=2) + "\n")
    checkpoint.save(out / "base.ckpt", result["base"].state_dict())
    for mode, model in result["models"].items():
        checkpoint.save(out / f"{SYSTEM_NAMES[mode]}.ckpt", model.state_dict())
