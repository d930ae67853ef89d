"""Bias lists, rare-word vocabularies and the train/eval list builders."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

NO_BIAS = "<no_bias>"

Phrase = tuple[str, ...]


class NotEnoughDistractorsError(ValueError):
    pass


def _as_phrase(p) -> Phrase:
    if isinstance(p, str):
        return tuple(p.split())
    return tuple(p)


@dataclass(frozen=True)
class BiasList:
    """Ordered bias phrases. Index 0 is always ``<no_bias>``; real phrases sit at 1..S."""

    phrases: tuple[Phrase, ...] = ()

    def __post_init__(self):
        normed = tuple(_as_phrase(p) for p in self.phrases)
        seen = set()
        for p in normed:
            if not p:
                raise ValueError("bias phrases must be non-empty")
            if p == (NO_BIAS,):
                raise ValueError("<no_bias> is implicit and may not be listed")
            if p in seen:
                raise ValueError(f"duplicate bias phrase {' '.join(p)!r}")
            seen.add(p)
        object.__setattr__(self, "phrases", normed)

    def __len__(self) -> int:
        return len(self.phrases) + 1

    @property
    def entries(self) -> list[Phrase]:
        return [(NO_BIAS,)] + list(self.phrases)

    def index(self, phrase) -> int:
        """Position of ``phrase`` in the list (``<no_bias>`` is 0)."""
        p = _as_phrase(phrase)
        if p == (NO_BIAS,):
            return 0
        return self.phrases.index(p) + 1

    def words(self) -> set[str]:
        return {w for p in self.phrases for w in p}


def empty_bias_list() -> BiasList:
    return BiasList(())


@dataclass
class RareVocab:
    rare_words: frozenset[str]
    common_words: frozenset[str]
    k: int
    ranked: tuple[str, ...] = field(default=(), repr=False)

    def is_rare(self, word: str) -> bool:
        return word in self.rare_words


def build_rare_vocab(word_frequencies: Mapping[str, int], k: int) -> RareVocab:
    """Everything outside the ``k`` most frequent words is rare (ties broken lexicographically)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    ranked = tuple(sorted(word_frequencies, key=lambda w: (-word_frequencies[w], w)))
    common = frozenset(ranked[:k])
    rare = frozenset(ranked[k:])
    return RareVocab(rare_words=rare, common_words=common, k=k, ranked=ranked)


def _rare_in_order(tokens: Iterable[str], rare: RareVocab) -> list[str]:
    out: list[str] = []
    for w in tokens:
        if w in rare.rare_words and w not in out:
            out.append(w)
    return out


def training_bias_list(batch: Sequence[Sequence[str]], rare: RareVocab) -> BiasList:
    """Union of rare words over the batch, in first-occurrence order."""
    if not batch:
        raise ValueError("training batch is empty")
    return BiasList(tuple((w,) for w in _rare_in_order((w for utt in batch for w in utt), rare)))


def eval_bias_list(utterance: Sequence[str], rare: RareVocab, n_distractors: int, seed: int) -> BiasList:
    """The utterance's rare words plus ``n_distractors`` sampled absent rare words, shuffled."""
    present = _rare_in_order(utterance, rare)
    pool = sorted(rare.rare_words - set(present))
    if n_distractors > len(pool):
        raise NotEnoughDistractorsError(
            f"asked for {n_distractors} distractors but only {len(pool)} rare words are absent from the utterance"
        )
    rng = np.random.default_rng(seed)
    picked = [pool[i] for i in rng.choice(len(pool), size=n_distractors, replace=False)] if n_distractors else []
    words = present + picked
    order = rng.permutation(len(words))
    return BiasList(tuple((words[i],) for i in order))


def word_frequencies(utterances: Iterable[Sequence[str]]) -> dict[str, int]:
    counts: Counter[str] = Counter()
    for utt in utterances:
        counts.update(utt)
    return dict(counts)


# file formats -------------------------------------------------------------


def write_bias_list(path: str | Path, bias: BiasList) -> None:
    """One phrase per line; ``<no_bias>`` is implicit and never written."""
    Path(path).write_text("".join(" ".join(p) + "\n" for p in bias.phrases), encoding="utf-8")


def read_bias_list(path: str | Path) -> BiasList:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return BiasList(tuple(tuple(line.split()) for line in lines if line.strip()))


def write_frequency_table(path: str | Path, freqs: Mapping[str, int]) -> None:
    rows = sorted(freqs.items(), key=lambda kv: (-kv[1], kv[0]))
    Path(path).write_text("".join(f"{w}\t{c}\n" for w, c in rows), encoding="utf-8")


def read_frequency_table(path: str | Path) -> dict[str, int]:
    out: dict[str, int] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        word, count = line.split()
        out[word] = int(count)
    return out
