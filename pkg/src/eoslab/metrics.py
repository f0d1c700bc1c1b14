"""ROUGE scores, length-violation metrics and the punctuation cut-off proxy.

ROUGE here is F1, lowercased, whitespace-tokenized, without stemming or
stopword removal. Scores are in [0, 1]; reports scale them to [0, 100].
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass

from .errors import ShapeError

TERMINAL_CHARS = frozenset(".!?\"')…”’")

_SENTENCE_SPLIT = re.compile(r"\n|(?<=[.!?])\s+")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap, n_pred, n_ref):
    # 2PR/(P+R) rewritten as a single integer division, so it is correctly rounded
    if overlap == 0 or n_pred == 0 or n_ref == 0:
        return 0.0
    return 2 * overlap / (n_pred + n_ref)


def rouge_n(pred: str, ref: str, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    p, r = _ngrams(tokenize(pred), n), _ngrams(tokenize(ref), n)
    overlap = sum((p & r).values())
    return _f1(overlap, sum(p.values()), sum(r.values()))


def lcs_table(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a, 1):
        row, prev = table[i], table[i - 1]
        for j, y in enumerate(b, 1):
            row[j] = prev[j - 1] + 1 if x == y else max(prev[j], row[j - 1])
    return table


def lcs_length(a, b) -> int:
    return lcs_table(a, b)[-1][-1]


def rouge_l(pred: str, ref: str) -> float:
    p, r = tokenize(pred), tokenize(ref)
    return _f1(lcs_length(p, r), len(p), len(r))


def _lcs_indices(ref_tokens, pred_tokens) -> set[int]:
    """Indices into ``ref_tokens`` on one longest common subsequence."""
    t = lcs_table(ref_tokens, pred_tokens)
    i, j, hits = len(ref_tokens), len(pred_tokens), set()
    while i > 0 and j > 0:
        if ref_tokens[i - 1] == pred_tokens[j - 1]:
            hits.add(i - 1)
            i -= 1
            j -= 1
        elif t[i - 1][j] >= t[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return hits


def split_sentences(text: str) -> list[str]:
    return [s for s in _SENTENCE_SPLIT.split(text) if s.strip()]


def rouge_lsum(pred: str, ref: str) -> float:
    """Summary-level ROUGE-L: union LCS of each reference sentence against all
    predicted sentences, with hits clipped by token counts."""
    pred_sents = [tokenize(s) for s in split_sentences(pred)]
    ref_sents = [tokenize(s) for s in split_sentences(ref)]
    n_pred = sum(len(s) for s in pred_sents)
    n_ref = sum(len(s) for s in ref_sents)
    if n_pred == 0 or n_ref == 0:
        return 0.0
    pred_counts = Counter(t for s in pred_sents for t in s)
    ref_counts = Counter(t for s in ref_sents for t in s)
    hits = 0
    for ref_tokens in ref_sents:
        union = set()
        for pred_tokens in pred_sents:
            union |= _lcs_indices(ref_tokens, pred_tokens)
        for idx in sorted(union):
            tok = ref_tokens[idx]
            if pred_counts[tok] > 0 and ref_counts[tok] > 0:
                hits += 1
                pred_counts[tok] -= 1
                ref_counts[tok] -= 1
    return _f1(hits, n_pred, n_ref)


def length_metrics(preds: list[str], limits: list[int]) -> tuple[float, float]:
    """Percent of predictions over their limit, and mean overshoot over all samples."""
    if len(preds) != len(limits):
        raise ShapeError(f"{len(preds)} predictions but {len(limits)} limits")
    if not preds:
        return 0.0, 0.0
    over = [max(0, len(p) - k) for p, k in zip(preds, limits)]
    pct = 100.0 * sum(1 for o in over if o > 0) / len(preds)
    return pct, sum(over) / len(preds)


def is_cut_off(text: str) -> bool:
    stripped = text.rstrip()
    return not stripped or stripped[-1] not in TERMINAL_CHARS


def pct_cutoff(preds: list[str]) -> float:
    if not preds:
        return 0.0
    return 100.0 * sum(is_cut_off(p) for p in preds) / len(preds)


@dataclass
class MetricsReport:
    rouge1: float
    rouge2: float
    rougeL: float
    rougeLsum: float
    pct_too_long: float
    avg_extra_chars: float
    pct_cutoff: float
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(preds: list[str], refs: list[str], limits: list[int | None]) -> MetricsReport:
    """Corpus-level report: ROUGE averaged per sample, length metrics over samples
    that carry a limit."""
    if not (len(preds) == len(refs) == len(limits)):
        raise ShapeError("predictions, references and limits must have equal length")
    n = len(preds)
    if n == 0:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0)

    def mean(vals):
        # sorted summation keeps the aggregate independent of sample order
        return 100.0 * sum(sorted(vals)) / n

    limited = [(p, k) for p, k in zip(preds, limits) if k is not None]
    too_long, extra = length_metrics([p for p, _ in limited], [k for _, k in limited])
    return MetricsReport(
        rouge1=mean([rouge_n(p, r, 1) for p, r in zip(preds, refs)]),
        rouge2=mean([rouge_n(p, r, 2) for p, r in zip(preds, refs)]),
        rougeL=mean([rouge_l(p, r) for p, r in zip(preds, refs)]),
        rougeLsum=mean([rouge_lsum(p, r) for p, r in zip(preds, refs)]),
        pct_too_long=too_long,
        avg_extra_chars=extra,
        pct_cutoff=pct_cutoff(preds),
        n_samples=n,
    )
