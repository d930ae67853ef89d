"""WER with a biased / unbiased breakdown."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


@dataclass(frozen=True)
class EditOp:
    kind: str
    ref: str | None
    hyp: str | None


def word_align(ref: Sequence[str], hyp: Sequence[str]) -> list[EditOp]:
    """Minimum-edit alignment with unit costs.

    Among equal-cost alignments the backtrace prefers match, then
    substitution, then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i][j] = min(diag, cost[i - 1][j] + 1, cost[i][j - 1] + 1)
    ops: list[EditOp] = []
    i, j = n, m
    while i or j:
        c = cost[i][j]
        if i and j and ref[i - 1] == hyp[j - 1] and cost[i - 1][j - 1] == c:
            ops.append(EditOp(MATCH, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i and j and cost[i - 1][j - 1] + 1 == c:
            ops.append(EditOp(SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i and cost[i - 1][j] + 1 == c:
            ops.append(EditOp(DEL, ref[i - 1], None))
            i -= 1
        else:
            ops.append(EditOp(INS, None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def edit_cost(ops: Iterable[EditOp]) -> int:
    return sum(op.kind != MATCH for op in ops)


@dataclass
class ErrorCounts:
    sub: int = 0
    dele: int = 0
    ins: int = 0
    ref: int = 0

    @property
    def errors(self) -> int:
        return self.sub + self.dele + self.ins

    @property
    def rate_defined(self) -> bool:
        return self.ref > 0

    @property
    def rate(self) -> float:
        """Error rate in [0, inf); with no reference words this is the raw error count."""
        return self.errors / self.ref if self.ref else float(self.errors)

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.sub + other.sub, self.dele + other.dele, self.ins + other.ins, self.ref + other.ref)

    def to_dict(self) -> dict:
        return {"sub": self.sub, "del": self.dele, "ins": self.ins, "ref": self.ref,
                "rate": self.rate, "rate_defined": self.rate_defined}


@dataclass
class EvalReport:
    all: ErrorCounts = field(default_factory=ErrorCounts)
    biased: ErrorCounts = field(default_factory=ErrorCounts)
    unbiased: ErrorCounts = field(default_factory=ErrorCounts)
    utterances: int = 0

    @property
    def wer(self) -> float:
        return self.all.rate

    @property
    def b_wer(self) -> float:
        return self.biased.rate

    @property
    def u_wer(self) -> float:
        return self.unbiased.rate

    def to_dict(self) -> dict:
        return {"utterances": self.utterances, "all": self.all.to_dict(),
                "biased": self.biased.to_dict(), "unbiased": self.unbiased.to_dict()}


INSERTION_RULES = ("hyp", "unbiased")


def wer_breakdown(ref: Sequence[str], hyp: Sequence[str], bias_words: set[str] | frozenset[str],
                  insertions: str = "hyp") -> EvalReport:
    """Score one utterance.

    Substitutions and deletions are charged to the class of the reference
    word. With ``insertions="hyp"`` an insertion is biased iff the inserted
    word is a bias word; ``"unbiased"`` charges every insertion to U-WER.
    """
    if insertions not in INSERTION_RULES:
        raise ValueError(f"unknown insertion rule {insertions!r}")
    rep = EvalReport(utterances=1)
    for w in ref:
        cls = rep.biased if w in bias_words else rep.unbiased
        cls.ref += 1
        rep.all.ref += 1
    for op in word_align(ref, hyp):
        if op.kind == MATCH:
            continue
        if op.kind == INS:
            biased = insertions == "hyp" and op.hyp in bias_words
        else:
            biased = op.ref in bias_words
        cls = rep.biased if biased else rep.unbiased
        attr = {SUB: "sub", DEL: "dele", INS: "ins"}[op.kind]
        setattr(cls, attr, getattr(cls, attr) + 1)
        setattr(rep.all, attr, getattr(rep.all, attr) + 1)
    return rep


def aggregate(reports: Sequence[EvalReport]) -> EvalReport:
    """Pool counts over utterances (micro-average)."""
    if not reports:
        raise ValueError("nothing to aggregate")
    out = EvalReport()
    for r in reports:
        out.all = out.all + r.all
        out.biased = out.biased + r.biased
        out.unbiased = out.unbiased + r.unbiased
        out.utterances += r.utterances
    return out
