import itertools
import zlib

import numpy as np
import pytest

from eoslab.decode import (
    BeamHypothesis, GenerationConfig, beam_score, beam_search, beam_search_hypotheses, greedy_decode,
    truncate_baseline,
)
from eoslab.errors import EmptySequenceError


class TableModel:
    """Step model whose next-token logits are a fixed function of (prompt, prefix)."""

    def __init__(self, vocab_size=4, eos_id=0, seed=0, table=None):
        self.vocab_size = vocab_size
        self.eos_id = eos_id
        self.seed = seed
        self.table = table or {}

    def logits(self, prompt, prefix):
        key = tuple(prefix)
        if key in self.table:
            return np.asarray(self.table[key], dtype=np.float64)
        h = zlib.crc32(repr((self.seed, tuple(prompt), key)).encode())
        return np.random.default_rng(h).normal(scale=2.0, size=self.vocab_size)

    def start(self, prompt_ids, copies=1):
        return _State(self, list(prompt_ids), [[] for _ in range(copies)])


class _State:
    def __init__(self, model, prompt, prefixes):
        self.model, self.prompt, self.prefixes = model, prompt, prefixes

    @property
    def last_logits(self):
        return np.stack([self.model.logits(self.prompt, p) for p in self.prefixes])

    def select(self, rows):
        return _State(self.model, self.prompt, [list(self.prefixes[r]) for r in rows])

    def extend(self, tokens):
        for p, t in zip(self.prefixes, tokens):
            p.append(int(t))
        return self.last_logits


def log_softmax(x):
    x = x - x.max()
    return x - np.log(np.exp(x).sum())


def exhaustive_best(model, prompt, max_new, lp):
    """Enumerate every finished sequence (EOS-terminated or max length)."""
    best = None
    v, eos = model.vocab_size, model.eos_id
    for length in range(1, max_new + 1):
        for seq in itertools.product(range(v), repeat=length):
            if eos in seq[:-1]:
                continue
            if length < max_new and seq[-1] != eos:
                continue
            lp_sum = sum(log_softmax(model.logits(prompt, seq[:i]))[t] for i, t in enumerate(seq))
            score = lp_sum / length ** lp
            if best is None or score > best[0] + 1e-12:
                best = (score, list(seq))
    return best


def test_immediate_eos():
    m = TableModel(table={(): [5.0, 0, 0, 0]})
    out = greedy_decode(m, [1], GenerationConfig(max_new_tokens=10))
    assert out.ids == [0]


def test_three_token_argmax_walk():
    table = {(): [0, 0, 3.0, 0], (2,): [0, 4.0, 0, 0], (2, 1): [0, 0, 0, 1.0], (2, 1, 3): [9.0, 0, 0, 0]}
    out = greedy_decode(TableModel(table=table), [1], GenerationConfig(max_new_tokens=10))
    assert out.ids == [2, 1, 3, 0]


def test_greedy_tie_goes_to_lowest_id():
    m = TableModel(table={(): [0, 2.0, 2.0, 0], (1,): [1.0, 0, 0, 0]})
    assert greedy_decode(m, [1], GenerationConfig(max_new_tokens=5)).ids == [1, 0]


def test_greedy_respects_max_new_tokens():
    m = TableModel(table={(): [0, 1.0, 0, 0], (1,): [0, 1.0, 0, 0], (1, 1): [0, 1.0, 0, 0]})
    assert greedy_decode(m, [1], GenerationConfig(max_new_tokens=3)).ids == [1, 1, 1]


def test_suppress_eos():
    m = TableModel(table={(): [5.0, 1.0, 0, 0], (1,): [5.0, 0, 0, 2.0]})
    out = greedy_decode(m, [1], GenerationConfig(max_new_tokens=2, suppress_eos=True))
    assert out.ids == [1, 3]


def test_beam_score_arithmetic():
    h = BeamHypothesis([5, 6, 7, 8], -4.0)
    assert beam_score(h, 0.0) == -4.0
    assert beam_score(h, 1.0) == -1.0
    assert beam_score(h, -1.0) == -16.0
    with pytest.raises(EmptySequenceError):
        beam_score(BeamHypothesis([], 0.0), 1.0)


@pytest.mark.parametrize("lp", [-1.0, 0.0, 1.0])
def test_full_width_beam_is_exhaustive(lp):
    for seed in range(20):
        m = TableModel(vocab_size=3, eos_id=0, seed=seed)
        max_new = 4
        width = sum(3 ** i for i in range(1, max_new + 1))
        cfg = GenerationConfig("beam", width, lp, max_new)
        best = exhaustive_best(m, [seed], max_new, lp)
        got = beam_search_hypotheses(m, [seed], cfg)[0]
        assert got.score == pytest.approx(best[0], abs=1e-9)
        assert got.ids == best[1]


def test_one_beam_equals_greedy():
    for seed in range(50):
        m = TableModel(vocab_size=4, eos_id=0, seed=seed)
        g = greedy_decode(m, [seed], GenerationConfig(max_new_tokens=5)).ids
        b = beam_search(m, [seed], GenerationConfig("beam", 1, 0.0, 5)).ids
        assert g == b


def test_beam_hypotheses_sorted_and_bounded():
    m = TableModel(vocab_size=4, eos_id=0, seed=7)
    hyps = beam_search_hypotheses(m, [1], GenerationConfig("beam", 3, 1.0, 5))
    assert 1 <= len(hyps) <= 3
    scores = [h.score for h in hyps]
    assert scores == sorted(scores, reverse=True)
    assert all(h.finished for h in hyps)


def test_beam_deterministic():
    m = TableModel(vocab_size=4, eos_id=0, seed=11)
    cfg = GenerationConfig("beam", 4, -1.0, 5)
    assert beam_search(m, [2], cfg).ids == beam_search(m, [2], cfg).ids


def test_truncation():
    assert truncate_baseline("hello world", 5) == "hello"
    assert truncate_baseline("hi", 5) == "hi"
    assert truncate_baseline("héllo wörld", 8) == "héllo wö"
    assert len(truncate_baseline("日本語テキスト", 3)) == 3
    with pytest.raises(ValueError):
        truncate_baseline("x", -1)


def test_generation_config_validation_and_labels():
    with pytest.raises(ValueError):
        GenerationConfig(strategy="sample")
    with pytest.raises(ValueError):
        GenerationConfig(num_beams=0)
    assert GenerationConfig().label == "greedy"
    assert GenerationConfig("beam", 5, -1.0).label == "beam5_lp-1"
    assert GenerationConfig(truncate_at_chars="limit").label == "greedy_trunclimit"
