"""Toy transducer with contextual adapters (catalog encoder + audio/text biasing attention)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from ctxbias import tensor as tn
from ctxbias.biaslist import BiasList
from ctxbias.losses import TransducerLattice
from ctxbias.tensor import DimensionError, Tensor
from ctxbias.vocab import Vocab

SOS = 0


@dataclass
class ModelConfig:
    vocab_size: int  # including blank at 0
    feature_dim: int
    embed_dim: int = 64
    n_heads: int = 4
    joint_dim: int = 64
    catalog_hidden: int = 32  # per LSTM direction
    seed: int = 0

    def to_meta(self) -> dict[str, np.ndarray]:
        return {f"meta.{k}": np.array(float(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, arrays: Mapping[str, np.ndarray]) -> "ModelConfig":
        kw = {f.name: int(arrays[f"meta.{f.name}"]) for f in fields(cls) if f"meta.{f.name}" in arrays}
        return cls(**kw)


@dataclass
class AttentionScores:
    """Head-averaged attention matrix plus the per-head matrices it was averaged from."""

    A: Tensor  # L x (S+1)
    heads: list[Tensor]

    @property
    def rows(self) -> int:
        return self.A.shape[0]


@dataclass
class ForwardOutput:
    lattice: TransducerLattice
    enc: Tensor
    dec: Tensor
    attn_enc: AttentionScores | None = None
    attn_dec: AttentionScores | None = None


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def lstm_step(x: Tensor, h: Tensor, c: Tensor, p: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM step for a batch of rows; gate order is input, forget, cell, output."""
    H = h.shape[1]
    gates = tn.add(tn.affine(x, p["wx"], p["b"]), tn.matmul(h, p["wh"]))
    i = tn.sigmoid(tn.slice_cols(gates, 0, H))
    f = tn.sigmoid(tn.slice_cols(gates, H, 2 * H))
    g = tn.tanh(tn.slice_cols(gates, 2 * H, 3 * H))
    o = tn.sigmoid(tn.slice_cols(gates, 3 * H, 4 * H))
    c_new = tn.add(tn.mul(f, c), tn.mul(i, g))
    h_new = tn.mul(o, tn.tanh(c_new))
    return h_new, c_new


def _zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)))


def biasing_attention(h: Tensor, P: Tensor, params: Mapping[str, Tensor], n_heads: int) -> tuple[AttentionScores, Tensor]:
    """Multi-head cross attention from rows of ``h`` onto phrase embeddings ``P``.

    Returns the head-averaged scores and the biasing vectors (L x E).
    """
    E = h.shape[1]
    if P.shape[1] != params["wk"].shape[0]:
        raise DimensionError(f"phrase embedding width {P.shape[1]} does not match adapter width {params['wk'].shape[0]}")
    if E % n_heads:
        raise DimensionError(f"embedding size {E} not divisible by {n_heads} heads")
    d = E // n_heads
    x = tn.matmul(h, params["w_in"])
    Q = tn.matmul(x, params["wq"])
    K = tn.matmul(P, params["wk"])
    V = tn.matmul(P, params["wv"])
    heads, ctx = [], []
    for i in range(n_heads):
        lo, hi = i * d, (i + 1) * d
        q, k, v = tn.slice_cols(Q, lo, hi), tn.slice_cols(K, lo, hi), tn.slice_cols(V, lo, hi)
        a = tn.softmax_rows(tn.matmul(q, tn.transpose(k)), math.sqrt(d))
        heads.append(a)
        ctx.append(tn.matmul(a, v))
    merged = ctx[0] if n_heads == 1 else tn.concat_cols(ctx)
    b = tn.matmul(merged, params["w_out"])
    avg = heads[0] if n_heads == 1 else tn.scale(tn.add_n(heads), 1.0 / n_heads)
    return AttentionScores(avg, heads), b


def fuse(h: Tensor, b: Tensor) -> Tensor:
    """Context-aware representation: element-wise sum of hidden state and biasing vector."""
    return tn.add(h, b)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

ADAPTER_PREFIXES = ("catalog.", "audio.", "text.")


class ContextualTransducer:
    """Frame-level feedforward encoder, LSTM prediction network, tanh joint, and two biasing adapters."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        if params is None:
            params = {}
            params.update(self._init_base(np.random.default_rng([cfg.seed, 0])))
            params.update(self.init_adapters(params, cfg.seed))
        self.params = params

    # -- parameters -------------------------------------------------------

    def _init_base(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c = self.cfg
        E, F, V, J = c.embed_dim, c.feature_dim, c.vocab_size, c.joint_dim
        shapes = [
            ("enc.w1", (F, E), F), ("enc.b1", (1, E), F),
            ("enc.w2", (E, E), E), ("enc.b2", (1, E), E),
            ("pred.embed", (V, E), E),
            ("pred.wx", (E, 4 * E), E), ("pred.wh", (E, 4 * E), E), ("pred.b", (1, 4 * E), E),
            ("joint.we", (E, J), E), ("joint.wd", (E, J), E), ("joint.b", (1, J), E),
            ("joint.wo", (J, V), J), ("joint.bo", (1, V), J),
            ("ctc.w", (E, V), E), ("ctc.b", (1, V), E),
        ]
        return {n: tn.init_uniform(rng, s, fan, name=n) for n, s, fan in shapes}

    def init_adapters(self, base: Mapping[str, Tensor], seed: int) -> dict[str, Tensor]:
        """Fresh adapter parameters; the catalog embedding starts as a copy of the prediction embedding."""
        c = self.cfg
        rng = np.random.default_rng([seed, 1])
        E, Hc, V = c.embed_dim, c.catalog_hidden, c.vocab_size
        shapes = [
            ("catalog.fw.wx", (E, 4 * Hc), E), ("catalog.fw.wh", (Hc, 4 * Hc), Hc), ("catalog.fw.b", (1, 4 * Hc), Hc),
            ("catalog.bw.wx", (E, 4 * Hc), E), ("catalog.bw.wh", (Hc, 4 * Hc), Hc), ("catalog.bw.b", (1, 4 * Hc), Hc),
            ("catalog.proj", (2 * Hc, E), 2 * Hc), ("catalog.proj_b", (1, E), 2 * Hc),
            ("catalog.no_bias", (1, E), E),
        ]
        for side in ("audio", "text"):
            for w in ("w_in", "wq", "wk", "wv", "w_out"):
                shapes.append((f"{side}.{w}", (E, E), E))
        out = {n: tn.init_uniform(rng, s, fan, name=n) for n, s, fan in shapes}
        # zero output projections: an untrained adapter adds nothing to the base model
        for side in ("audio", "text"):
            out[f"{side}.w_out"] = Tensor(np.zeros((E, E)), requires_grad=True, name=f"{side}.w_out")
        out["catalog.embed"] = Tensor(base["pred.embed"].data.copy(), requires_grad=True, name="catalog.embed")
        return out

    def reset_adapters(self, seed: int) -> None:
        self.params.update(self.init_adapters(self.params, seed))

    def names(self, group: str) -> list[str]:
        is_adapter = lambda n: n.startswith(ADAPTER_PREFIXES)  # noqa: E731
        if group == "adapter":
            return sorted(n for n in self.params if is_adapter(n))
        if group == "base":
            return sorted(n for n in self.params if not is_adapter(n))
        raise ValueError(group)

    def set_trainable(self, names: Sequence[str]) -> None:
        keep = set(names)
        for n, p in self.params.items():
            p.requires_grad = n in keep
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data.copy() for n, p in self.params.items()}
        out.update(self.cfg.to_meta())
        return out

    @classmethod
    def from_state_dict(cls, arrays: Mapping[str, np.ndarray]) -> "ContextualTransducer":
        cfg = ModelConfig.from_meta(arrays)
        params = {n: Tensor(a.copy(), requires_grad=True, name=n) for n, a in arrays.items() if not n.startswith("meta.")}
        return cls(cfg, params)

    def _group(self, prefix: str) -> dict[str, Tensor]:
        return {n[len(prefix):]: p for n, p in self.params.items() if n.startswith(prefix)}

    # -- base network -----------------------------------------------------

    def encode(self, features: Tensor) -> Tensor:
        p = self.params
        if features.shape[1] != self.cfg.feature_dim:
            raise DimensionError(f"features have width {features.shape[1]}, model expects {self.cfg.feature_dim}")
        h = tn.tanh(tn.affine(features, p["enc.w1"], p["enc.b1"]))
        return tn.tanh(tn.affine(h, p["enc.w2"], p["enc.b2"]))

    def predict(self, prev_tokens: Sequence[int]) -> Tensor:
        """Prediction-network states for SOS followed by ``prev_tokens``: (U+1) x E."""
        p = self._group("pred.")
        E = self.cfg.embed_dim
        emb = tn.take_rows(p["embed"], [SOS] + list(prev_tokens))
        h, c = _zeros(1, E), _zeros(1, E)
        rows = []
        for i in range(emb.shape[0]):
            h, c = lstm_step(tn.take_rows(emb, [i]), h, c, p)
            rows.append(h)
        return rows[0] if len(rows) == 1 else tn.concat_rows(rows)

    def base_forward(self, features: Tensor, prev_tokens: Sequence[int]) -> tuple[Tensor, Tensor]:
        return self.encode(features), self.predict(prev_tokens)

    def joint_forward(self, enc: Tensor, dec: Tensor) -> Tensor:
        """Log-distribution over the vocabulary at every (t, u): T x (U+1) x V."""
        p = self.params
        T, U1 = enc.shape[0], dec.shape[0]
        if enc.shape[1] != dec.shape[1]:
            raise DimensionError(f"joint: encoder width {enc.shape[1]} vs decoder width {dec.shape[1]}")
        a = tn.matmul(enc, p["joint.we"])
        b = tn.affine(dec, p["joint.wd"], p["joint.b"])
        grid = tn.add(tn.take_rows(a, np.repeat(np.arange(T), U1)), tn.take_rows(b, np.tile(np.arange(U1), T)))
        logits = tn.affine(tn.tanh(grid), p["joint.wo"], p["joint.bo"])
        return tn.reshape(tn.log_softmax_rows(logits), (T, U1, self.cfg.vocab_size))

    def ctc_log_probs(self, enc: Tensor) -> Tensor:
        """Auxiliary frame-level CTC head used for forced alignment."""
        return tn.log_softmax_rows(tn.affine(enc, self.params["ctc.w"], self.params["ctc.b"]))

    # -- biasing ----------------------------------------------------------

    def encode_catalog(self, phrases: Sequence[Sequence[int]]) -> Tensor:
        """Phrase embeddings, (S+1) x E, with the learned ``<no_bias>`` row first."""
        p = self.params
        V = self.cfg.vocab_size
        for ph in phrases:
            if not ph:
                raise ValueError("empty bias phrase")
            for tok in ph:
                if not 0 < tok < V:
                    raise IndexError(f"token id {tok} outside vocabulary of size {V}")
        if not phrases:
            return p["catalog.no_bias"]
        fw, bw = self._group("catalog.fw."), self._group("catalog.bw.")
        Hc = self.cfg.catalog_hidden
        by_len: dict[int, list[int]] = {}
        for i, ph in enumerate(phrases):
            by_len.setdefault(len(ph), []).append(i)
        blocks, order = [], []
        for length in sorted(by_len):
            idx = by_len[length]
            n = len(idx)
            steps = [tn.take_rows(p["catalog.embed"], [phrases[i][j] for i in idx]) for j in range(length)]
            h, c = _zeros(n, Hc), _zeros(n, Hc)
            for x in steps:
                h, c = lstm_step(x, h, c, fw)
            hb, cb = _zeros(n, Hc), _zeros(n, Hc)
            for x in reversed(steps):
                hb, cb = lstm_step(x, hb, cb, bw)
            blocks.append(tn.affine(tn.concat_cols([h, hb]), p["catalog.proj"], p["catalog.proj_b"]))
            order.extend(idx)
        stacked = blocks[0] if len(blocks) == 1 else tn.concat_rows(blocks)
        inverse = np.empty(len(order), dtype=np.int64)
        inverse[np.asarray(order)] = np.arange(len(order))
        if not np.array_equal(inverse, np.arange(len(order))):
            stacked = tn.take_rows(stacked, inverse)
        return tn.concat_rows([p["catalog.no_bias"], stacked])

    def audio_adapter(self, enc: Tensor, P: Tensor) -> tuple[AttentionScores, Tensor]:
        return biasing_attention(enc, P, self._group("audio."), self.cfg.n_heads)

    def text_adapter(self, dec: Tensor, P: Tensor) -> tuple[AttentionScores, Tensor]:
        return biasing_attention(dec, P, self._group("text."), self.cfg.n_heads)

    # -- full passes ------------------------------------------------------

    def forward(self, features: Tensor, tokens: Sequence[int], phrases: Sequence[Sequence[int]] | None = None,
                P: Tensor | None = None) -> ForwardOutput:
        """Transducer lattice for ``tokens``; adapters are skipped when no bias list is given.

        ``P`` may be passed to reuse a catalog encoding shared by a batch.
        """
        enc, dec = self.base_forward(features, tokens)
        return self.forward_from(enc, dec, tokens, phrases, P)

    def forward_from(self, enc: Tensor, dec: Tensor, tokens: Sequence[int],
                     phrases: Sequence[Sequence[int]] | None = None, P: Tensor | None = None) -> ForwardOutput:
        """Same as ``forward`` but starting from already computed encoder and prediction-network outputs."""
        if phrases is None and P is None:
            return ForwardOutput(TransducerLattice(self.joint_forward(enc, dec), tokens), enc, dec)
        if P is None:
            P = self.encode_catalog(phrases)
        attn_enc, b_enc = self.audio_adapter(enc, P)
        attn_dec, b_dec = self.text_adapter(dec, P)
        lattice = TransducerLattice(self.joint_forward(fuse(enc, b_enc), fuse(dec, b_dec)), tokens)
        return ForwardOutput(lattice, enc, dec, attn_enc, attn_dec)

    def greedy_decode(self, features: Tensor, phrases: Sequence[Sequence[int]] | None = None,
                      max_symbols_per_frame: int = 5) -> list[int]:
        """Frame-synchronous greedy search; argmax ties go to the lower token id."""
        p = self.params
        with tn.no_grad():
            enc = self.encode(features)
            P = None
            if phrases is not None:
                P = self.encode_catalog(phrases)
                enc = fuse(enc, self.audio_adapter(enc, P)[1])
            enc_proj = tn.matmul(enc, p["joint.we"]).data
            pred = self._group("pred.")
            E = self.cfg.embed_dim
            h, c = _zeros(1, E), _zeros(1, E)

            def advance(token, h, c):
                h, c = lstm_step(tn.take_rows(pred["embed"], [token]), h, c, pred)
                d = h
                if P is not None:
                    d = fuse(h, self.text_adapter(h, P)[1])
                return h, c, tn.affine(d, p["joint.wd"], p["joint.b"]).data

            h, c, dec_proj = advance(SOS, h, c)
            wo, bo = p["joint.wo"].data, p["joint.bo"].data
            hyp: list[int] = []
            for t in range(enc_proj.shape[0]):
                for _ in range(max_symbols_per_frame):
                    logits = np.tanh(enc_proj[t:t + 1] + dec_proj) @ wo + bo
                    k = int(np.argmax(logits[0]))
                    if k == 0:
                        break
                    hyp.append(k)
                    h, c, dec_proj = advance(k, h, c)
        return hyp


# ---------------------------------------------------------------------------
# module-level conveniences over BiasList / Vocab
# ---------------------------------------------------------------------------


def phrase_ids(bias: BiasList, vocab: Vocab) -> list[list[int]]:
    return [vocab.encode(list(ph)) for ph in bias.phrases]


def encode_catalog(model: ContextualTransducer, bias: BiasList, vocab: Vocab) -> Tensor:
    return model.encode_catalog(phrase_ids(bias, vocab))


def greedy_decode(model: ContextualTransducer, features, bias: BiasList | None, vocab: Vocab,
                  max_symbols_per_frame: int = 5) -> list[str]:
    feats = features if isinstance(features, Tensor) else Tensor(features)
    phrases = None if bias is None else phrase_ids(bias, vocab)
    return vocab.decode(model.greedy_decode(feats, phrases, max_symbols_per_frame))
