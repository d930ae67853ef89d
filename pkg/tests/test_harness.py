import json
from dataclasses import replace

import numpy as np
import pytest

from ctxbias import checkpoint
from ctxbias.adapter import ContextualTransducer
from ctxbias.biaslist import build_rare_vocab
from ctxbias.harness import (SYSTEM_NAMES, PretrainConfig, SuiteConfig, TrainConfig, evaluate, format_table,
                             pretrain_base, run_suite, train_adapters, write_suite_outputs)
from ctxbias.synth import SynthConfig, synth_corpus

TINY_SYNTH = SynthConfig(vocab_size=14, feature_dim=6, noise_std=0.2, n_train=80, n_test=20, seed=2)
TINY_PRETRAIN = PretrainConfig(epochs=40, lr=1e-2, batch_size=4, embed_dim=16, n_heads=2, joint_dim=16,
                               catalog_hidden=8, ctc_epochs=2, loss_threshold=0.02, seed=0)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(TINY_SYNTH)


@pytest.fixture(scope="module")
def rare(corpus):
    return build_rare_vocab(corpus.train_frequencies(), 4)


@pytest.fixture(scope="module")
def pretrained(corpus):
    return pretrain_base(corpus, TINY_PRETRAIN)


class TestConfigs:
    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(ga_mode="ga_xx")
        with pytest.raises(ValueError):
            TrainConfig(alpha=1.5)
        with pytest.raises(ValueError):
            TrainConfig(empty_list_prob=2.0)

    def test_suite_config_round_trip(self):
        cfg = SuiteConfig(synth=TINY_SYNTH, pretrain=TINY_PRETRAIN, sweep=[0, 3])
        assert SuiteConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestPretrain:
    def test_noise_free_wer(self, corpus, pretrained):
        model, _ = pretrained
        clean = synth_corpus(replace(TINY_SYNTH, noise_std=0.0))
        rep = evaluate(model, clean, build_rare_vocab(clean.train_frequencies(), 4), mode="vanilla")
        assert rep.wer < 0.10

    def test_loss_curve_nonincreasing_within_jitter(self, corpus):
        # fixed training features; with per-epoch noise the curve is only monotone on average
        cfg = replace(TINY_PRETRAIN, epochs=12, lr=3e-3, resample_noise=False, ctc_epochs=0)
        losses = np.array(pretrain_base(corpus, cfg)[1].epoch_loss)
        assert np.all(losses <= 1.05 * np.minimum.accumulate(losses))
        assert losses[-1] < losses[0]

    def test_checkpoint_round_trip(self, pretrained, tmp_path):
        model, _ = pretrained
        checkpoint.save(tmp_path / "b.ckpt", model.state_dict())
        again = checkpoint.load(tmp_path / "b.ckpt")
        state = model.state_dict()
        assert set(again) == set(state)
        assert all(np.array_equal(again[k], state[k]) and again[k].dtype == state[k].dtype for k in state)

    def test_stops_at_threshold(self, corpus):
        _, hist = pretrain_base(corpus, replace(TINY_PRETRAIN, loss_threshold=1e9, epochs=5))
        assert len(hist.epoch_loss) == 1


class TestTrainAdapters:
    def test_base_bitwise_frozen(self, corpus, rare, pretrained):
        base, _ = pretrained
        before = base.state_dict()
        model, _ = train_adapters(base, corpus, rare, TrainConfig(epochs=1, ga_mode="ga_ce"))
        after = model.state_dict()
        for n in base.names("base"):
            assert np.array_equal(before[n], after[n]), n
        assert any(not np.array_equal(before[n], after[n]) for n in base.names("adapter"))
        # the input model itself is untouched as well
        assert all(np.array_equal(before[n], base.state_dict()[n]) for n in before)

    def test_unfrozen_base_moves(self, corpus, rare, pretrained):
        base, _ = pretrained
        model, _ = train_adapters(base, corpus, rare, TrainConfig(epochs=1, freeze_base=False))
        assert not np.array_equal(base.params["joint.wo"].data, model.params["joint.wo"].data)

    def test_none_mode_ignores_alpha(self, corpus, rare, pretrained):
        base, _ = pretrained
        a, ha = train_adapters(base, corpus, rare, TrainConfig(epochs=1, alpha=0.1))
        b, hb = train_adapters(base, corpus, rare, TrainConfig(epochs=1, alpha=0.9))
        assert ha.epoch_loss == hb.epoch_loss
        assert ha.epoch_loss == ha.epoch_transducer

    def test_ga_ctc_loss_decreases(self, corpus, rare, pretrained):
        base, _ = pretrained
        _, hist = train_adapters(base, corpus, rare, TrainConfig(epochs=6, ga_mode="ga_ctc", lr=3e-3))
        assert hist.epoch_ga[-1] < hist.epoch_ga[0]

    def test_deterministic(self, corpus, rare, pretrained):
        base, _ = pretrained
        cfg = TrainConfig(epochs=1, ga_mode="ga_ce", empty_list_prob=0.3)
        a, _ = train_adapters(base, corpus, rare, cfg)
        b, _ = train_adapters(base, corpus, rare, cfg)
        sa, sb = a.state_dict(), b.state_dict()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    def test_forced_alignment_labels(self, corpus, rare, pretrained):
        base, _ = pretrained
        _, hist = train_adapters(base, corpus, rare, TrainConfig(epochs=1, ga_mode="ga_ce", force_align=True))
        assert np.isfinite(hist.epoch_loss[0])

    def test_infeasible_ga_ctc_is_skipped_and_counted(self, rare, pretrained):
        # one frame per word leaves no room for CTC over repeated phrase labels
        base, _ = pretrained
        c = synth_corpus(replace(TINY_SYNTH, n_train=16, n_test=2, frames_per_token=2))
        for u in c.train:
            # squeeze each utterance to a single frame so every non-trivial label sequence is infeasible
            u.features = u.features[:1]
        _, hist = train_adapters(base, c, rare, TrainConfig(epochs=1, ga_mode="ga_ctc", resample_noise=False))
        assert hist.skipped_ga > 0


class TestEvaluate:
    def test_same_seed_same_report(self, corpus, rare, pretrained):
        base, _ = pretrained
        a = evaluate(base, corpus, rare, 3, seed=5)
        b = evaluate(base, corpus, rare, 3, seed=5)
        assert a == b

    def test_workers_do_not_change_results(self, corpus, rare, pretrained):
        base, _ = pretrained
        assert evaluate(base, corpus, rare, 3, seed=5) == evaluate(base, corpus, rare, 3, seed=5, workers=3)

    def test_modes(self, corpus, rare, pretrained):
        base, _ = pretrained
        with pytest.raises(ValueError):
            evaluate(base, corpus, rare, mode="other")
        rep = evaluate(base, corpus, rare, mode="vanilla")
        assert rep.utterances == len(corpus.test)


def test_suite_outputs(tmp_path, corpus, pretrained):
    base, _ = pretrained
    cfg = SuiteConfig(synth=TINY_SYNTH, pretrain=TINY_PRETRAIN, train=TrainConfig(epochs=1), rare_k=4, sweep=[0, 2])
    result = run_suite(cfg, corpus=corpus, base=base)
    recs = result["conditions"]
    assert len(recs) == 3 * (len(cfg.sweep) + 1)
    assert {r["system"] for r in recs} == set(SYSTEM_NAMES.values())
    write_suite_outputs(tmp_path, result)
    lines = (tmp_path / "results.jsonl").read_text().splitlines()
    assert len(lines) == len(recs)
    rec = json.loads(lines[0])
    for key in ("system", "N", "WER", "U-WER", "B-WER", "all", "biased", "unbiased", "utterances"):
        assert key in rec
    header = (tmp_path / "table.txt").read_text().splitlines()[0].split()
    assert header == ["system", "N", "WER", "U-WER", "B-WER"]
    plot = (tmp_path / "plot_data.tsv").read_text().splitlines()
    assert plot[0] == "system\tN\tB-WER" and len(plot) == 1 + 3 * len(cfg.sweep)
    assert ContextualTransducer.from_state_dict(checkpoint.load(tmp_path / "CA.ckpt")).cfg == base.cfg


def test_format_table_percentages():
    rec = {"system": "CA", "N": 5, "WER": 0.1234, "U-WER": 0.05, "B-WER": 0.5}
    row = format_table([rec]).splitlines()[1].split()
    assert row == ["CA", "5", "12.34", "5.00", "50.00"]
