"""CTC and transducer negative log-likelihoods in log space, plus brute-force oracles.

Impossible lattice states are carried as ``NEG`` (a large finite negative
number) rather than IEEE ``-inf`` so that every DP cell stays finite;
anything below ``NEG / 2`` is treated as probability zero.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ctxbias.tensor import Tensor, custom, log_softmax_rows, reshape

NEG = -1.0e30
BLANK = 0
NORM_TOL = 1e-9
BRUTE_FORCE_LIMIT = 10 ** 6


class InfeasibleAlignmentError(ValueError):
    """No alignment path can produce the requested labels."""


class InstanceTooLargeError(ValueError):
    """A brute-force oracle was asked to enumerate too many paths."""


@dataclass
class CtcLattice:
    log_probs: Tensor  # T x K, blank at column 0
    labels: Sequence[int]

    def __post_init__(self):
        self.labels = tuple(int(x) for x in self.labels)
        if self.log_probs.data.ndim != 2:
            raise ValueError(f"CTC log_probs must be T x K, got {self.log_probs.shape}")
        K = self.log_probs.shape[1]
        for lab in self.labels:
            if not 1 <= lab < K:
                raise ValueError(f"CTC label {lab} outside [1, {K - 1}]")


@dataclass
class TransducerLattice:
    joint_log_probs: Tensor  # T x (U+1) x V, blank at index 0
    labels: Sequence[int]

    def __post_init__(self):
        self.labels = tuple(int(x) for x in self.labels)
        shape = self.joint_log_probs.shape
        if len(shape) != 3 or shape[1] != len(self.labels) + 1:
            raise ValueError(f"joint_log_probs shape {shape} does not fit {len(self.labels)} labels")
        for lab in self.labels:
            if not 1 <= lab < shape[2]:
                raise ValueError(f"transducer label {lab} outside [1, {shape[2] - 1}]")


def _normalized_rows(lp: Tensor) -> Tensor:
    """Return ``lp`` unchanged if every row is a log-distribution, else renormalize it."""
    flat = lp.data.reshape(-1, lp.shape[-1])
    m = flat.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(flat - m).sum(axis=1, keepdims=True))).ravel()
    if np.all(np.abs(lse) <= NORM_TOL):
        return lp
    if lp.data.ndim == 2:
        return log_softmax_rows(lp)
    return reshape(log_softmax_rows(reshape(lp, flat.shape)), lp.shape)


def min_ctc_frames(labels: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extend(labels: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    allow = np.zeros(len(ext), dtype=bool)
    allow[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return allow


def _ctc_alpha_beta(lp: np.ndarray, labels: Sequence[int]):
    T = lp.shape[0]
    ext = _extend(labels)
    S = len(ext)
    allow = _skip_allowed(ext)
    emit = lp[:, ext]  # T x S
    alpha = np.full((T, S), NEG)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(allow[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = np.maximum(acc, NEG) + emit[t]
    # beta excludes the emission at t
    beta = np.full((T, S), NEG)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    allow_next = np.zeros(S, dtype=bool)
    allow_next[:-2] = allow[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(allow_next[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = np.maximum(acc, NEG)
    if S > 1:
        loglik = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        loglik = alpha[T - 1, 0]
    return ext, alpha, beta, float(loglik)


def ctc_loss(lattice: CtcLattice) -> Tensor:
    """-log P(labels | log_probs) summed over all CTC alignments."""
    lp_t = _normalized_rows(lattice.log_probs)
    lp = lp_t.data
    T, K = lp.shape
    labels = lattice.labels
    if T < 1:
        raise InfeasibleAlignmentError("CTC lattice has no frames")
    need = min_ctc_frames(labels)
    if T < need:
        raise InfeasibleAlignmentError(f"{len(labels)} labels need at least {need} frames, lattice has {T}")
    ext, alpha, beta, loglik = _ctc_alpha_beta(lp, labels)
    if loglik < NEG / 2:
        raise InfeasibleAlignmentError("all CTC paths have zero probability")

    def vjp(g):
        occ = np.exp(np.clip(alpha + beta - loglik, NEG / 2, 0.0))
        occ[alpha + beta < NEG / 2] = 0.0
        grad = np.zeros((T, K))
        for s, k in enumerate(ext):
            grad[:, k] -= occ[:, s]
        return ((lp_t, float(g) * grad),)

    return custom(np.array(-loglik), (lp_t,), vjp)


def ctc_brute_force(lattice: CtcLattice) -> float:
    """Enumerate every frame-level path; return -log of the mass collapsing to the labels."""
    lp = lattice.log_probs.data
    T, K = lp.shape
    if K ** T > BRUTE_FORCE_LIMIT:
        raise InstanceTooLargeError(f"{K}^{T} paths exceeds {BRUTE_FORCE_LIMIT}")
    target = tuple(lattice.labels)
    total = 0.0
    for path in itertools.product(range(K), repeat=T):
        if collapse(path) == target:
            total += math.exp(sum(lp[t, k] for t, k in enumerate(path)))
    if total == 0.0:
        raise InfeasibleAlignmentError("no frame-level path collapses to the labels")
    return -math.log(total)


def collapse(path: Sequence[int], blank: int = BLANK) -> tuple[int, ...]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return tuple(out)


def ctc_forced_align(lattice: CtcLattice) -> list[int]:
    """Most probable frame-level path (Viterbi); ties prefer blank, then the lower label position."""
    lp = lattice.log_probs.data
    T = lp.shape[0]
    labels = lattice.labels
    if T < min_ctc_frames(labels):
        raise InfeasibleAlignmentError(f"{len(labels)} labels cannot fit in {T} frames")
    ext = _extend(labels)
    S = len(ext)
    allow = _skip_allowed(ext)
    score = np.full((T, S), NEG)
    back = np.zeros((T, S), dtype=np.int64)
    score[0, 0] = lp[0, ext[0]]
    if S > 1:
        score[0, 1] = lp[0, ext[1]]

    def rank(c):
        return (0 if ext[c] == BLANK else 1, c)

    for t in range(1, T):
        for s in range(S):
            cands = [s]
            if s >= 1:
                cands.append(s - 1)
            if s >= 2 and allow[s]:
                cands.append(s - 2)
            best = max(score[t - 1, c] for c in cands)
            choice = min((c for c in cands if score[t - 1, c] == best), key=rank)
            back[t, s] = choice
            score[t, s] = max(best, NEG) + lp[t, ext[s]]
    finals = [S - 1] if S == 1 else [S - 1, S - 2]
    best = max(score[T - 1, f] for f in finals)
    if best < NEG / 2:
        raise InfeasibleAlignmentError("no CTC path with nonzero probability")
    s = min((f for f in finals if score[T - 1, f] == best), key=rank)
    states = [s]
    for t in range(T - 1, 0, -1):
        s = int(back[t, s])
        states.append(s)
    return [int(ext[s]) for s in reversed(states)]


def path_log_prob(log_probs: np.ndarray, path: Sequence[int]) -> float:
    return float(sum(log_probs[t, k] for t, k in enumerate(path)))


# ---------------------------------------------------------------------------
# transducer
# ---------------------------------------------------------------------------


def _scan_lse(start: np.ndarray, step: np.ndarray) -> np.ndarray:
    """x[0] = start[0]; x[t] = logaddexp(x[t-1] + step[t-1], start[t]), vectorised."""
    cum = np.concatenate([[0.0], np.cumsum(step[:-1])])
    return cum + np.logaddexp.accumulate(start - cum)


def _transducer_alpha_beta(lp: np.ndarray, labels: Sequence[int]):
    T, U1, _ = lp.shape
    U = U1 - 1
    blank = lp[:, :, BLANK]  # T x (U+1)
    emit = np.full((T, U1), NEG)
    for u, y in enumerate(labels):
        emit[:, u] = lp[:, u, y]
    alpha = np.empty((T, U1))
    start = np.full(T, NEG)
    start[0] = 0.0
    alpha[:, 0] = np.maximum(_scan_lse(start, blank[:, 0]), NEG)
    for u in range(1, U1):
        alpha[:, u] = np.maximum(_scan_lse(alpha[:, u - 1] + emit[:, u - 1], blank[:, u]), NEG)
    loglik = float(alpha[T - 1, U] + blank[T - 1, U])
    # beta[t, u]: log-prob of finishing from (t, u), including the move taken at (t, u)
    beta = np.empty((T, U1))
    rev_blank = blank[::-1]
    start = np.full(T, NEG)
    start[0] = blank[T - 1, U]
    # scanning backwards in t: beta[t,u] = lse(beta[t+1,u] + blank[t,u], beta[t,u+1] + emit[t,u])
    beta[:, U] = _scan_back(start, rev_blank[:, U])
    for u in range(U - 1, -1, -1):
        st = (beta[:, u + 1] + emit[:, u])[::-1]
        beta[:, u] = _scan_back(st, rev_blank[:, u])
    beta = np.maximum(beta, NEG)
    return blank, emit, alpha, beta, loglik


def _scan_back(start_rev: np.ndarray, blank_rev: np.ndarray) -> np.ndarray:
    # in reversed time r = T-1-t: y[r] = logaddexp(y[r-1] + blank_rev[r], start_rev[r])
    T = len(start_rev)
    shifted = np.concatenate([[0.0], blank_rev[1:]])  # step into r uses blank at r
    cum = np.cumsum(shifted)
    out = cum + np.logaddexp.accumulate(start_rev - cum)
    return out[::-1][:T]


def transducer_loss(lattice: TransducerLattice) -> Tensor:
    """-log P(y | x) over the T x (U+1) grid (blank advances t, emission advances u)."""
    lp_t = _normalized_rows(lattice.joint_log_probs)
    lp = lp_t.data
    T, U1, V = lp.shape
    if T < 1:
        raise ValueError("transducer lattice needs at least one frame")
    labels = lattice.labels
    blank, emit, alpha, beta, loglik = _transducer_alpha_beta(lp, labels)

    def vjp(g):
        grad = np.zeros_like(lp)
        nxt_blank = np.full((T, U1), NEG)
        nxt_blank[:-1] = beta[1:]
        nxt_blank[T - 1, U1 - 1] = 0.0
        gb = np.exp(np.minimum(alpha + blank + nxt_blank - loglik, 0.0))
        gb[alpha + nxt_blank < NEG / 2] = 0.0
        grad[:, :, BLANK] = -gb
        for u, y in enumerate(labels):
            ge = np.exp(np.minimum(alpha[:, u] + emit[:, u] + beta[:, u + 1] - loglik, 0.0))
            ge[alpha[:, u] + beta[:, u + 1] < NEG / 2] = 0.0
            grad[:, u, y] -= ge
        return ((lp_t, float(g) * grad),)

    return custom(np.array(-loglik), (lp_t,), vjp)


def count_transducer_paths(T: int, U: int) -> int:
    return math.comb(T - 1 + U, U)


def transducer_brute_force(lattice: TransducerLattice) -> float:
    """Sum over every monotone path emitting exactly the labels and T blanks."""
    lp = lattice.joint_log_probs.data
    T, U1, _ = lp.shape
    U = U1 - 1
    labels = lattice.labels
    if count_transducer_paths(T, U) > BRUTE_FORCE_LIMIT:
        raise InstanceTooLargeError("too many transducer paths to enumerate")
    total = 0.0
    # the last move is always the blank at (T-1, U); choose which of the
    # other T-1+U moves are emissions
    for emit_slots in itertools.combinations(range(T - 1 + U), U):
        slots = set(emit_slots)
        t = u = 0
        logp = 0.0
        for step in range(T - 1 + U):
            if step in slots:
                logp += lp[t, u, labels[u]]
                u += 1
            else:
                logp += lp[t, u, BLANK]
                t += 1
        logp += lp[T - 1, U, BLANK]
        total += math.exp(logp)
    return -math.log(total)
