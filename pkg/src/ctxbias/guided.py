"""Phrase-index labels and the guided-attention auxiliary losses."""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from ctxbias import tensor as tn
from ctxbias.adapter import AttentionScores
from ctxbias.biaslist import BiasList
from ctxbias.losses import BLANK, CtcLattice, collapse, ctc_loss
from ctxbias.tensor import DimensionError, Tensor

Scores = Union[AttentionScores, Tensor]


class InconsistentAlignmentError(ValueError):
    pass


def build_text_labels(tokens: Sequence[str], bias: BiasList) -> list[int]:
    """Per-token phrase index via greedy left-to-right longest match (ties: lowest index)."""
    tokens = list(tokens)
    by_first: dict[str, list[tuple[int, tuple[str, ...]]]] = {}
    for idx, phrase in enumerate(bias.phrases, start=1):
        by_first.setdefault(phrase[0], []).append((idx, phrase))
    labels = [0] * len(tokens)
    i = 0
    while i < len(tokens):
        best = None
        for idx, phrase in by_first.get(tokens[i], ()):
            n = len(phrase)
            if tuple(tokens[i:i + n]) == phrase:
                if best is None or n > best[1] or (n == best[1] and idx < best[0]):
                    best = (idx, n)
        if best is None:
            i += 1
            continue
        idx, n = best
        labels[i:i + n] = [idx] * n
        i += n
    return labels


def build_ctc_labels(c_dec: Sequence[int]) -> list[int]:
    """Drop ``<no_bias>`` (0) entries, then merge runs of equal indices."""
    out: list[int] = []
    for c in c_dec:
        if c == 0:
            continue
        if not out or out[-1] != c:
            out.append(int(c))
    return out


def build_frame_labels(alignment: Sequence[int], c_dec: Sequence[int], tokens: Sequence[int] | None = None) -> list[int]:
    """Give each frame the phrase index of the token it is aligned to (blank frames get 0).

    ``alignment`` holds per-frame token ids in CTC convention: a token spans a
    run of equal non-blank frames.
    """
    c_enc = []
    pos = -1
    prev = BLANK
    for k in alignment:
        if k == BLANK:
            c_enc.append(0)
        else:
            if k != prev:
                pos += 1
            if pos >= len(c_dec):
                raise InconsistentAlignmentError(f"alignment has more tokens than the {len(c_dec)} labels")
            c_enc.append(int(c_dec[pos]))
        prev = k
    if pos + 1 != len(c_dec):
        raise InconsistentAlignmentError(f"alignment covers {pos + 1} tokens, labels cover {len(c_dec)}")
    if tokens is not None and collapse(alignment) != tuple(tokens):
        raise InconsistentAlignmentError("alignment does not collapse to the token sequence")
    return c_enc


def _matrix(a: Scores) -> Tensor:
    return a.A if isinstance(a, AttentionScores) else a


def _ce(A: Tensor, labels: Sequence[int]) -> Tensor:
    if A.shape[0] != len(labels):
        raise DimensionError(f"{A.shape[0]} attention rows but {len(labels)} labels")
    if labels and max(labels) >= A.shape[1]:
        raise IndexError(f"label {max(labels)} outside {A.shape[1]} bias-list columns")
    if not labels:
        return Tensor(0.0)
    picked = tn.pick(A, np.arange(len(labels)), labels)
    return tn.scale(tn.sum_all(tn.log(picked)), -1.0 / len(labels))


def ga_ce_loss(A_enc: Scores, c_enc: Sequence[int], A_dec: Scores, c_dec: Sequence[int]) -> Tensor:
    """Row-averaged cross entropy of attention rows against phrase labels, audio plus text."""
    return tn.add(_ce(_matrix(A_enc), list(c_enc)), _ce(_matrix(A_dec), list(c_dec)))


def ga_ctc_loss(A_enc: Scores, A_dec: Scores, c_ctc: Sequence[int]) -> Tensor:
    """CTC over each attention matrix with ``<no_bias>`` (column 0) acting as blank."""
    labels = list(c_ctc)
    terms = []
    for A in (_matrix(A_enc), _matrix(A_dec)):
        if labels and max(labels) >= A.shape[1]:
            raise IndexError(f"label {max(labels)} outside {A.shape[1]} bias-list columns")
        terms.append(ctc_loss(CtcLattice(tn.log(A), labels)))
    return tn.add(terms[0], terms[1])


def combined_objective(l_transducer: Tensor, l_ga: Tensor, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return tn.add(tn.scale(l_ga, alpha), tn.scale(l_transducer, 1.0 - alpha))


def format_label_line(c_dec: Sequence[int], c_ctc: Sequence[int], c_enc: Sequence[int]) -> str:
    return "\t".join(" ".join(str(int(x)) for x in seq) for seq in (c_dec, c_ctc, c_enc))


def parse_label_line(line: str) -> tuple[list[int], list[int], list[int]]:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 3:
        raise ValueError(f"label line needs 3 tab-separated fields, got {len(fields)}")
    c_dec, c_ctc, c_enc = ([int(x) for x in f.split()] for f in fields)
    return c_dec, c_ctc, c_enc
