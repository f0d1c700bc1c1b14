import itertools
from fractions import Fraction

import numpy as np
import pytest

from eoslab.errors import ShapeError
from eoslab.metrics import (
    evaluate, is_cut_off, lcs_length, length_metrics, pct_cutoff, rouge_l, rouge_lsum, rouge_n,
)

WORDS = ["a", "b", "c", "d", "e"]


def oracle_f1(overlap, n_pred, n_ref):
    if overlap == 0:
        return 0.0
    p, r = Fraction(overlap, n_pred), Fraction(overlap, n_ref)
    return float(2 * p * r / (p + r))


def oracle_ngram_overlap(pred, ref, n):
    """Greedy one-to-one matching of n-gram occurrences."""
    pg = [tuple(pred[i:i + n]) for i in range(len(pred) - n + 1)]
    rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
    used = [False] * len(rg)
    hits = 0
    for g in pg:
        for j, h in enumerate(rg):
            if not used[j] and g == h:
                used[j] = True
                hits += 1
                break
    return hits, len(pg), len(rg)


def oracle_lcs(a, b):
    """Longest subsequence of ``a`` that is also a subsequence of ``b``, by enumeration."""
    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for k in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), k):
            if is_subseq([a[i] for i in idx], b):
                return k
    return 0


def random_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        p = [WORDS[i] for i in rng.integers(0, 5, size=rng.integers(0, 8))]
        r = [WORDS[i] for i in rng.integers(0, 5, size=rng.integers(0, 8))]
        yield p, r


def test_rouge2_fixture():
    assert rouge_n("a b c d", "a b x c d", 2) == pytest.approx(4 / 7)
    assert abs(rouge_n("a b c d", "a b x c d", 2) - 0.5714) < 1e-4


def test_rougel_fixture():
    # LCS 3 of 4 tokens on both sides
    assert rouge_l("a b c d", "a x c d") == pytest.approx(0.75)


def test_identity_and_empty():
    assert rouge_n("the cat sat", "The cat sat", 1) == 1.0
    assert rouge_l("x y", "x y") == 1.0
    assert rouge_n("", "a b", 1) == 0.0
    assert rouge_l("a", "") == 0.0
    assert rouge_n("a", "a", 2) == 0.0


@pytest.mark.parametrize("n", [1, 2])
def test_rouge_n_matches_bruteforce(n):
    for p, r in random_pairs(1000, seed=n):
        hits, np_, nr = oracle_ngram_overlap(p, r, n)
        assert rouge_n(" ".join(p), " ".join(r), n) == oracle_f1(hits, np_, nr)


def test_rouge_l_matches_bruteforce():
    for p, r in random_pairs(1000, seed=9):
        k = oracle_lcs(p, r)
        assert lcs_length(p, r) == k
        assert rouge_l(" ".join(p), " ".join(r)) == oracle_f1(k, len(p), len(r))


def test_rouge_lsum_single_sentence_equals_rouge_l():
    for p, r in random_pairs(200, seed=4):
        assert rouge_lsum(" ".join(p), " ".join(r)) == rouge_l(" ".join(p), " ".join(r))


def test_rouge_lsum_multi_sentence():
    # sentence order does not matter at summary level
    assert rouge_lsum("c d.\na b.", "a b. c d.") == 1.0
    assert rouge_l("c d. a b.", "a b. c d.") < 1.0


def test_length_metrics_fixture():
    preds = ["x" * 10, "x" * 12, "x" * 9, "x" * 15]
    pct, extra = length_metrics(preds, [10] * 4)
    assert pct == 50.0
    assert extra == pytest.approx((0 + 2 + 0 + 5) / 4)
    with pytest.raises(ShapeError):
        length_metrics(["a"], [1, 2])


def test_cutoff_fixture():
    cases = {
        "A full sentence.": False,
        "Is it?": False,
        "Wow!": False,
        'He said "hi."': False,
        "(see above.)": False,
        "Trailing space.  ": False,
        "and then the": True,
        "ends with comma,": True,
        "": True,
        "number 42": True,
    }
    for text, cut in cases.items():
        assert is_cut_off(text) is cut, text
    assert pct_cutoff(list(cases)) == 40.0


def test_evaluate_identity():
    refs = ["a b c.", "d e f g."]
    rep = evaluate(refs, refs, [100, 100])
    assert rep.rouge1 == rep.rouge2 == rep.rougeL == rep.rougeLsum == 100.0
    assert rep.pct_too_long == 0.0 and rep.pct_cutoff == 0.0 and rep.n_samples == 2


def test_evaluate_permutation_invariant():
    rng = np.random.default_rng(5)
    pairs = [(" ".join(p) + ".", " ".join(r) + ".") for p, r in random_pairs(60, seed=5)]
    limits = [int(x) for x in rng.integers(1, 20, size=len(pairs))]
    a = evaluate([p for p, _ in pairs], [r for _, r in pairs], limits)
    perm = rng.permutation(len(pairs))
    b = evaluate([pairs[i][0] for i in perm], [pairs[i][1] for i in perm], [limits[i] for i in perm])
    assert a == b


def test_evaluate_skips_missing_limits():
    rep = evaluate(["xxxx", "yy"], ["a", "b"], [2, None])
    assert rep.pct_too_long == 100.0 and rep.avg_extra_chars == 2.0


def test_rouge_n_rejects_zero():
    with pytest.raises(ValueError):
        rouge_n("a", "a", 0)
