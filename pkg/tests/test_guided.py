import numpy as np
import pytest

from ctxbias import tensor as tn
from ctxbias.adapter import AttentionScores
from ctxbias.biaslist import BiasList
from ctxbias.guided import (InconsistentAlignmentError, build_ctc_labels, build_frame_labels, build_text_labels,
                            combined_objective, format_label_line, ga_ce_loss, ga_ctc_loss, parse_label_line)
from ctxbias.losses import CtcLattice, collapse, ctc_loss
from ctxbias.tensor import DimensionError, Tensor

from conftest import assert_grad_close, numeric_grad


def softmax_logits(rng, rows, cols):
    return Tensor(rng.normal(size=(rows, cols)), requires_grad=True)


def random_alignment(rng, tokens, extra_blanks=3):
    """Frame sequence in CTC convention that collapses to ``tokens``."""
    frames = []
    for i, t in enumerate(tokens):
        frames += [0] * int(rng.integers(0, extra_blanks))
        if frames and frames[-1] == t:
            frames.append(0)
        frames += [t] * int(rng.integers(1, 3))
    frames += [0] * int(rng.integers(0, extra_blanks))
    return frames


class TestTextLabels:
    def test_single_words(self):
        bias = BiasList((("dog",), ("cat",)))
        assert build_text_labels("the cat sat".split(), bias) == [0, 2, 0]

    def test_multi_token_phrase(self):
        bias = BiasList((("new", "york"), ("york",)))
        assert build_text_labels("in new york".split(), bias) == [0, 1, 1]

    def test_longest_match(self):
        bias = BiasList((("new",), ("new", "york", "city")))
        assert build_text_labels("new york city".split(), bias) == [2, 2, 2]

    def test_no_bias_list(self):
        assert build_text_labels("a b".split(), BiasList(())) == [0, 0]


class TestCtcLabels:
    def test_merge_and_drop(self):
        assert build_ctc_labels([0, 2, 2, 0, 3]) == [2, 3]

    def test_same_phrase_twice_merges(self):
        # dropping no-bias first means a phrase repeated around plain words is a single label
        assert build_ctc_labels([1, 0, 1]) == [1]

    def test_all_zero(self):
        assert build_ctc_labels([0, 0]) == []


class TestFrameLabels:
    def test_basic(self):
        assert build_frame_labels([0, 5, 5, 0, 7, 0], [1, 0]) == [0, 1, 1, 0, 0, 0]

    def test_repeated_token_after_blank(self):
        assert build_frame_labels([4, 0, 4], [2, 3], tokens=[4, 4]) == [2, 0, 3]

    def test_too_few_labels(self):
        with pytest.raises(InconsistentAlignmentError):
            build_frame_labels([1, 2], [1])

    def test_too_many_labels(self):
        with pytest.raises(InconsistentAlignmentError):
            build_frame_labels([1, 1], [1, 2])

    def test_wrong_tokens(self):
        with pytest.raises(InconsistentAlignmentError):
            build_frame_labels([1, 2], [0, 0], tokens=[1, 3])


class TestGaCe:
    def test_perfect_attention_is_zero(self):
        A = Tensor(np.eye(3))
        assert ga_ce_loss(A, [0, 1, 2], A, [0, 1, 2]).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_attention(self):
        A = Tensor(np.full((4, 5), 0.2))
        assert ga_ce_loss(A, [0, 1, 2, 3], A, [4, 4, 4, 4]).item() == pytest.approx(2 * np.log(5))

    def test_accepts_attention_scores(self):
        A = Tensor(np.full((2, 2), 0.5))
        s = AttentionScores(A, [A])
        assert ga_ce_loss(s, [0, 1], s, [1, 1]).item() == ga_ce_loss(A, [0, 1], A, [1, 1]).item()

    def test_shape_errors(self):
        A = Tensor(np.full((2, 2), 0.5))
        with pytest.raises(DimensionError):
            ga_ce_loss(A, [0], A, [0, 0])
        with pytest.raises(IndexError):
            ga_ce_loss(A, [0, 2], A, [0, 0])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        xe, xd = softmax_logits(rng, 5, 4), softmax_logits(rng, 3, 4)
        ce, cd = list(rng.integers(0, 4, size=5)), list(rng.integers(0, 4, size=3))

        def f(a, b):
            return ga_ce_loss(tn.softmax_rows(a), ce, tn.softmax_rows(b), cd)

        f(xe, xd).backward()
        assert_grad_close(xe.grad, numeric_grad(lambda: f(Tensor(xe.data), Tensor(xd.data)).item(), xe.data))
        assert_grad_close(xd.grad, numeric_grad(lambda: f(Tensor(xe.data), Tensor(xd.data)).item(), xd.data))


class TestGaCtc:
    def test_is_sum_of_ctc_losses(self, rng):
        Ae = tn.softmax_rows(Tensor(rng.normal(size=(6, 4))))
        Ad = tn.softmax_rows(Tensor(rng.normal(size=(4, 4))))
        expected = ctc_loss(CtcLattice(tn.log(Ae), [1, 3])).item() + ctc_loss(CtcLattice(tn.log(Ad), [1, 3])).item()
        assert ga_ctc_loss(Ae, Ad, [1, 3]).item() == expected

    def test_single_entry_list_is_free(self):
        # only <no_bias> in the list: attention is all ones, and the all-blank path costs nothing
        A = Tensor(np.ones((5, 1)))
        assert ga_ctc_loss(A, Tensor(np.ones((2, 1))), []).item() == 0.0

    def test_label_out_of_range(self):
        A = Tensor(np.full((3, 2), 0.5))
        with pytest.raises(IndexError):
            ga_ctc_loss(A, A, [2])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        xe, xd = softmax_logits(rng, 6, 4), softmax_logits(rng, 4, 4)
        c = [1, 2]

        def f(a, b):
            return ga_ctc_loss(tn.softmax_rows(a), tn.softmax_rows(b), c)

        f(xe, xd).backward()
        assert_grad_close(xe.grad, numeric_grad(lambda: f(Tensor(xe.data), Tensor(xd.data)).item(), xe.data))
        assert_grad_close(xd.grad, numeric_grad(lambda: f(Tensor(xe.data), Tensor(xd.data)).item(), xd.data))


class TestCombined:
    def test_endpoints(self):
        lt, lg = Tensor(2.0), Tensor(5.0)
        assert combined_objective(lt, lg, 0.0).item() == 2.0
        assert combined_objective(lt, lg, 1.0).item() == 5.0
        assert combined_objective(lt, lg, 0.5).item() == 3.5

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            combined_objective(Tensor(1.0), Tensor(1.0), 1.5)


def test_label_line_round_trip():
    line = format_label_line([0, 1, 1], [1], [0, 0, 1, 1, 1, 0])
    assert line.count("\t") == 2
    assert parse_label_line(line + "\n") == ([0, 1, 1], [1], [0, 0, 1, 1, 1, 0])
    assert parse_label_line(format_label_line([0], [], [0])) == ([0], [], [0])
    with pytest.raises(ValueError):
        parse_label_line("1 2\t3")


def test_label_properties_random(rng):
    words = [f"w{i}" for i in range(8)]
    for _ in range(300):
        tokens = list(rng.choice(words, size=rng.integers(0, 8)))
        phrases = {tuple(rng.choice(words, size=rng.integers(1, 3))) for _ in range(rng.integers(0, 5))}
        bias = BiasList(tuple(sorted(phrases)))
        c_dec = build_text_labels(tokens, bias)
        c_ctc = build_ctc_labels(c_dec)
        assert all(0 <= c < len(bias) for c in c_dec)
        assert 0 not in c_ctc and all(a != b for a, b in zip(c_ctc, c_ctc[1:]))
        ids = [words.index(t) + 1 for t in tokens]
        ali = random_alignment(rng, ids)
        c_enc = build_frame_labels(ali, c_dec, tokens=ids)
        assert collapse(ali) == tuple(ids)
        assert [c for c, a in zip(c_enc, ali) if a == 0] == [0] * ali.count(0)
