"""Synthetic 'speech' corpus: words are fixed random feature signatures plus noise.

Words are ranked by a Zipf profile. Optionally the words past
``cluster_from_rank`` are grouped into small clusters whose signatures are
perturbations of a shared prototype, which makes low-frequency words
acoustically confusable with each other.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ctxbias.biaslist import word_frequencies, write_frequency_table
from ctxbias.vocab import Vocab


@dataclass
class SynthConfig:
    vocab_size: int = 50
    frames_per_token: int = 3
    feature_dim: int = 16
    noise_std: float = 0.5
    n_train: int = 500
    n_test: int = 100
    zipf_exponent: float = 1.2
    min_words: int = 3
    max_words: int = 8
    cluster_from_rank: int = 0  # 0 disables clustering
    cluster_size: int = 1
    cluster_spread: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.frames_per_token < 2:
            raise ValueError("frames_per_token must be at least 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("need 1 <= min_words <= max_words")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2 (no immediate repeats)")


@dataclass
class Utterance:
    uid: str
    words: list[str]
    features: np.ndarray  # T x F
    alignment: list[int]  # per-frame token id (CTC convention; no blanks in ground truth)
    spans: list[tuple[int, int]] = field(default_factory=list)  # [start, stop) frame span per word

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    config: SynthConfig
    vocab: Vocab
    train: list[Utterance]
    test: list[Utterance]
    signatures: np.ndarray  # (V_words + 1) x frames_per_token x F, row 0 unused

    def clean_features(self, utt: Utterance) -> np.ndarray:
        return np.concatenate([self.signatures[self.vocab.id(w)] for w in utt.words], axis=0)

    def renoised_features(self, utt: Utterance, rng: np.random.Generator) -> np.ndarray:
        """Same words and timing as ``utt`` with a fresh noise draw."""
        clean = self.clean_features(utt)
        return clean + self.config.noise_std * rng.standard_normal(clean.shape)

    def train_frequencies(self) -> dict[str, int]:
        freqs = {w: 0 for w in self.vocab.words[1:]}
        freqs.update(word_frequencies(u.words for u in self.train))
        return freqs


def zipf_probs(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def _signatures(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    V, L, F = cfg.vocab_size, cfg.frames_per_token, cfg.feature_dim
    sig = rng.standard_normal((V + 1, L, F))
    sig[0] = 0.0
    if cfg.cluster_from_rank and cfg.cluster_size > 1:
        tail = np.arange(cfg.cluster_from_rank + 1, V + 1)  # word ids are 1-based ranks
        tail = tail[rng.permutation(len(tail))]
        for start in range(0, len(tail), cfg.cluster_size):
            members = tail[start:start + cfg.cluster_size]
            proto = rng.standard_normal((L, F))
            for m in members:
                sig[m] = proto + cfg.cluster_spread * rng.standard_normal((L, F))
    return sig


def _utterance(uid: str, cfg: SynthConfig, vocab: Vocab, sig: np.ndarray, probs: np.ndarray,
               rng: np.random.Generator) -> Utterance:
    n = int(rng.integers(cfg.min_words, cfg.max_words + 1))
    ids: list[int] = []
    while len(ids) < n:
        w = int(rng.choice(len(probs), p=probs)) + 1
        if ids and ids[-1] == w:
            continue
        ids.append(w)
    L = cfg.frames_per_token
    clean = np.concatenate([sig[w] for w in ids], axis=0)
    feats = clean + cfg.noise_std * rng.standard_normal(clean.shape) if cfg.noise_std > 0 else clean.copy()
    alignment = [w for w in ids for _ in range(L)]
    spans = [(i * L, (i + 1) * L) for i in range(len(ids))]
    return Utterance(uid, vocab.decode(ids), feats, alignment, spans)


def synth_corpus(cfg: SynthConfig) -> Corpus:
    """Generate train/test utterances with exact frame spans for every word."""
    rng = np.random.default_rng(cfg.seed)
    vocab = Vocab(f"w{i:03d}" for i in range(1, cfg.vocab_size + 1))
    sig = _signatures(cfg, rng)
    probs = zipf_probs(cfg.vocab_size, cfg.zipf_exponent)
    train = [_utterance(f"train-{i:05d}", cfg, vocab, sig, probs, rng) for i in range(cfg.n_train)]
    test = [_utterance(f"test-{i:05d}", cfg, vocab, sig, probs, rng) for i in range(cfg.n_test)]
    return Corpus(cfg, vocab, train, test, sig)


# on-disk layout -----------------------------------------------------------


def format_alignment_line(uid: str, frames: Sequence[int]) -> str:
    return uid + " " + " ".join(str(int(f)) for f in frames)


def parse_alignment_line(line: str) -> tuple[str, list[int]]:
    parts = line.split()
    return parts[0], [int(x) for x in parts[1:]]


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(corpus.config), indent=2, sort_keys=True) + "\n")
    corpus.vocab.save(out / "vocab.txt")
    write_frequency_table(out / "freq.txt", corpus.train_frequencies())
    for split in ("train", "test"):
        utts: list[Utterance] = getattr(corpus, split)
        (out / f"{split}.txt").write_text("".join(u.uid + " " + " ".join(u.words) + "\n" for u in utts))
        (out / f"{split}.ali").write_text("".join(format_alignment_line(u.uid, u.alignment) + "\n" for u in utts))
        np.savez(out / f"{split}_feats.npz", **{u.uid: u.features for u in utts})
    np.save(out / "signatures.npy", corpus.signatures)


def load_corpus(corpus_dir: str | Path) -> Corpus:
    d = Path(corpus_dir)
    cfg = SynthConfig(**json.loads((d / "config.json").read_text()))
    vocab = Vocab.load(d / "vocab.txt")
    splits = {}
    for split in ("train", "test"):
        feats = np.load(d / f"{split}_feats.npz")
        alis = dict(parse_alignment_line(l) for l in (d / f"{split}.ali").read_text().splitlines() if l.strip())
        utts = []
        for line in (d / f"{split}.txt").read_text().splitlines():
            if not line.strip():
                continue
            uid, *words = line.split()
            L = cfg.frames_per_token
            spans = [(i * L, (i + 1) * L) for i in range(len(words))]
            utts.append(Utterance(uid, words, np.array(feats[uid]), alis[uid], spans))
        splits[split] = utts
    sig = np.load(d / "signatures.npy")
    return Corpus(cfg, vocab, splits["train"], splits["test"], sig)
