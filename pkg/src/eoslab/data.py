"""Synthetic summarization corpus, fixed/dynamic dataset builders, JSONL I/O.

A synthetic source is a list of short facts (``"red fox."``); some are marked
with ``*``. The reference summary is the marked facts in order, followed by a
random tail of unmarked facts. The tail makes the right stopping point
genuinely uncertain, which is what EOS weighting acts on.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError, ParseError

log = logging.getLogger(__name__)

DYNAMIC_PROMPT = "Summarize with up to {K} characters the following text:"

ADJECTIVES = (
    "red", "blue", "old", "tiny", "wild", "calm", "dark", "pale",
    "brave", "quick", "shy", "loud", "green", "bold", "slow", "warm",
)
NOUNS = (
    "fox", "owl", "ship", "lamp", "tree", "river", "stone", "bird",
    "cat", "cloud", "drum", "gate", "horse", "moon", "road", "wolf",
)
MARK = "*"


@dataclass
class Sample:
    source: str
    reference: str
    char_limit: int | None = None
    id: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.reference:
            raise ValueError(f"sample {self.id!r} has an empty reference")

    def to_json(self) -> dict:
        out = {"id": self.id, "source": self.source, "reference": self.reference}
        if self.char_limit is not None:
            out["char_limit"] = self.char_limit
        for k, v in self.extra.items():
            out.setdefault(k, v)
        return out


@dataclass
class DatasetSpec:
    variant: str = "fixed"
    fixed_char_limit: int = 250
    k_start: int = 50
    k_stop: int = 800
    k_step: int = 50
    n_train: int = 10_000
    n_val: int = 500
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("fixed", "dynamic"):
            raise ValueError(f"variant must be 'fixed' or 'dynamic', got {self.variant!r}")
        if self.fixed_char_limit <= 0:
            raise ValueError("fixed_char_limit must be positive")
        if not (0 < self.k_start <= self.k_stop and self.k_step > 0):
            raise ValueError(f"invalid K grid ({self.k_start}, {self.k_stop}, {self.k_step})")


@dataclass
class CorpusConfig:
    """Shape of the synthetic corpus.

    ``min_marked``/``max_marked`` bound the number of marked facts (drawn
    log-uniformly). Each tail fact is appended with probability ``tail_prob``
    until the first miss or until ``noise_items`` are appended.
    """

    min_marked: int = 1
    max_marked: int = 48
    extra_unmarked: int = 1
    noise_items: int = 3
    tail_prob: float = 0.6
    min_sentences: int = 1


@dataclass
class Dataset:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    dropped: int = 0

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _fact(rng) -> str:
    return f"{ADJECTIVES[rng.integers(len(ADJECTIVES))]} {NOUNS[rng.integers(len(NOUNS))]}."


def _distinct_facts(rng, n) -> list[str]:
    seen, out = set(), []
    while len(out) < n:
        f = _fact(rng)
        if f not in seen:
            seen.add(f)
            out.append(f)
    return out


def count_sentences(text: str) -> int:
    return len([s for s in split_sentences(text) if s.strip()])


def split_sentences(text: str) -> list[str]:
    return [s for s in re.split(r"\n|(?<=[.!?])\s+", text) if s.strip()]


def gen_synthetic_corpus(seed: int, size: int, noise_items: int | None = None,
                         config: CorpusConfig | None = None) -> list[Sample]:
    if size < 1:
        raise ValueError("corpus size must be at least 1")
    cfg = config or CorpusConfig()
    if noise_items is None:
        noise_items = cfg.noise_items
    rng = np.random.default_rng(seed)
    lo, hi = math.log(cfg.min_marked), math.log(cfg.max_marked + 1)
    samples = []
    i = 0
    while len(samples) < size:
        n_marked = min(cfg.max_marked, int(math.exp(rng.uniform(lo, hi))))
        n_unmarked = noise_items + int(rng.integers(cfg.extra_unmarked + 1))
        facts = _distinct_facts(rng, n_marked + n_unmarked)
        marked = np.zeros(len(facts), dtype=bool)
        marked[rng.permutation(len(facts))[:n_marked]] = True
        source = " ".join(MARK + f if m else f for f, m in zip(facts, marked))
        ref_facts = [f for f, m in zip(facts, marked) if m]
        pool = [f for f, m in zip(facts, marked) if not m]
        order = rng.permutation(len(pool))
        n_tail = 0
        while n_tail < noise_items and rng.random() < cfg.tail_prob:
            n_tail += 1
        ref_facts += [pool[j] for j in order[:n_tail]]
        reference = " ".join(ref_facts)
        sid = f"syn-{seed}-{i:06d}"
        i += 1
        if count_sentences(reference) < cfg.min_sentences:
            continue
        samples.append(Sample(source, reference, None, sid, {"n_marked": n_marked, "n_tail": n_tail}))
    return samples


def _split(pool: list[Sample], spec: DatasetSpec, dropped: int) -> Dataset:
    need = spec.n_train + spec.n_val + spec.n_test
    if len(pool) < need:
        raise InsufficientDataError(
            f"only {len(pool)} samples survive filtering; {need} requested "
            f"({spec.n_train}/{spec.n_val}/{spec.n_test})"
        )
    rng = np.random.default_rng([spec.seed, 17])
    chosen = [pool[j] for j in rng.permutation(len(pool))[:need]]
    a, b = spec.n_train, spec.n_train + spec.n_val
    return Dataset(chosen[:a], chosen[a:b], chosen[b:], dropped)


def build_fixed_length(corpus: list[Sample], limit: int, spec: DatasetSpec | None = None) -> Dataset:
    """Keep samples whose reference fits in ``limit`` characters, then split."""
    if limit <= 0:
        raise ValueError("limit must be positive")
    spec = spec or DatasetSpec(variant="fixed", fixed_char_limit=limit)
    kept = [
        Sample(s.source, s.reference, limit, s.id, dict(s.extra))
        for s in corpus
        if len(s.reference) <= limit
    ]
    return _split(kept, spec, len(corpus) - len(kept))


def round_up_to_grid(length: int, k_start: int, k_stop: int, k_step: int) -> int | None:
    """Smallest grid value >= ``length``, or None above the top of the grid."""
    k = k_start + max(0, math.ceil((length - k_start) / k_step)) * k_step
    return k if k <= k_stop else None


def dynamic_prompt(k: int) -> str:
    return DYNAMIC_PROMPT.format(K=k)


def build_dynamic_length(corpus: list[Sample], k_start: int, k_stop: int, k_step: int,
                         spec: DatasetSpec | None = None) -> Dataset:
    """Attach a per-sample limit K (rounded up to the grid) and prompt each source."""
    spec = spec or DatasetSpec(variant="dynamic", k_start=k_start, k_stop=k_stop, k_step=k_step)
    if not (0 < k_start <= k_stop and k_step > 0):
        raise ValueError(f"invalid K grid ({k_start}, {k_stop}, {k_step})")
    kept, dropped = [], 0
    for s in corpus:
        k = round_up_to_grid(len(s.reference), k_start, k_stop, k_step)
        if k is None:
            dropped += 1
            continue
        kept.append(Sample(f"{dynamic_prompt(k)} {s.source}", s.reference, k, s.id, dict(s.extra)))
    if dropped:
        log.warning("dropped %d references longer than k_stop=%d", dropped, k_stop)
    return _split(kept, spec, dropped)


def build_dataset(corpus: list[Sample], spec: DatasetSpec) -> Dataset:
    if spec.variant == "fixed":
        return build_fixed_length(corpus, spec.fixed_char_limit, spec)
    return build_dynamic_length(corpus, spec.k_start, spec.k_stop, spec.k_step, spec)


# -- JSONL ------------------------------------------------------------------

_KNOWN = ("id", "source", "reference", "char_limit")


def sample_from_json(obj: dict, line_no: int = 0) -> Sample:
    if not isinstance(obj, dict):
        raise ParseError(line_no, "expected a JSON object")
    for key in ("source", "reference"):
        if key not in obj:
            raise ParseError(line_no, f"missing field {key!r}")
        if not isinstance(obj[key], str):
            raise ParseError(line_no, f"field {key!r} must be a string")
    limit = obj.get("char_limit")
    if limit is not None and (not isinstance(limit, int) or isinstance(limit, bool) or limit <= 0):
        raise ParseError(line_no, "char_limit must be a positive integer")
    extra = {k: v for k, v in obj.items() if k not in _KNOWN}
    try:
        return Sample(obj["source"], obj["reference"], limit, str(obj.get("id", f"line-{line_no}")), extra)
    except ValueError as exc:
        raise ParseError(line_no, str(exc)) from None


def iter_json_lines(path):
    """Yield ``(line_no, obj)`` for each non-blank line; LF and CRLF both accepted."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON ({exc.msg})") from None


def read_jsonl(path) -> list[Sample]:
    return [sample_from_json(obj, n) for n, obj in iter_json_lines(path)]


def write_json_lines(path, objs):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=False) + "\n")


def write_jsonl(path, samples: list[Sample]):
    write_json_lines(path, (s.to_json() for s in samples))
