"""Greedy decoding, length-penalized beam search and the truncation baseline.

Decoders talk to a *step model*: anything with ``vocab_size``, ``eos_id`` and
``start(prompt_ids, copies)`` returning a state that exposes ``last_logits``
([rows, V]), ``select(rows)`` and ``extend(tokens)``. ``Transformer`` provides
this through its key/value cache; tests plug in hand-built tables.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySequenceError
from .model import EOS, TokenSequence


@dataclass
class GenerationConfig:
    strategy: str = "greedy"
    num_beams: int = 1
    length_penalty: float = 0.0
    max_new_tokens: int = 256
    truncate_at_chars: int | str | None = None
    suppress_eos: bool = False

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"strategy must be 'greedy' or 'beam', got {self.strategy!r}")
        if self.num_beams < 1:
            raise ValueError("num_beams must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    @property
    def label(self) -> str:
        if self.strategy == "greedy":
            base = "greedy"
        else:
            base = f"beam{self.num_beams}_lp{self.length_penalty:g}"
        if self.suppress_eos:
            base += "_noeos"
        if self.truncate_at_chars is not None:
            base += f"_trunc{self.truncate_at_chars}"
        return base


@dataclass
class BeamHypothesis:
    ids: list[int]
    sum_logprob: float = 0.0
    finished: bool = False
    score: float = field(default=float("nan"), compare=False)

    def __len__(self):
        return len(self.ids)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _step_model(model):
    """Adapt a Transformer (which lacks eos_id) to the step-model interface."""
    if hasattr(model, "eos_id"):
        return model, model.eos_id, model.vocab_size
    return model, EOS, model.config.vocab_size


def _mask_eos(logits, eos_id, on):
    if on:
        logits = logits.copy()
        logits[..., eos_id] = -np.inf
    return logits


def greedy_decode(model, prompt_ids, cfg: GenerationConfig) -> TokenSequence:
    """Argmax decoding (ties go to the lowest id); EOS, if emitted, is the last id."""
    model, eos_id, _ = _step_model(model)
    state = model.start(prompt_ids, 1)
    out = []
    logits = state.last_logits
    for _ in range(cfg.max_new_tokens):
        tok = int(np.argmax(_mask_eos(logits, eos_id, cfg.suppress_eos)[0]))
        out.append(tok)
        if tok == eos_id or len(out) == cfg.max_new_tokens:
            break
        logits = state.extend([tok])
    return TokenSequence(out)


def beam_score(h: BeamHypothesis, lp: float) -> float:
    """Length-normalized log-probability ``sum_logprob / len**lp``.

    Positive ``lp`` favours longer hypotheses.
    """
    if len(h) < 1:
        raise EmptySequenceError("cannot score an empty hypothesis")
    return h.sum_logprob / (len(h) ** lp)


def _best_possible(h: BeamHypothesis, lp: float, max_new: int) -> float:
    # upper bound on the final score of any extension of a live hypothesis
    if lp > 0:
        return h.sum_logprob / (max_new ** lp)
    return h.sum_logprob / ((len(h) + 1) ** lp)


def beam_search_hypotheses(model, prompt_ids, cfg: GenerationConfig) -> list[BeamHypothesis]:
    """Run beam search; return finished hypotheses best-first."""
    model, eos_id, _ = _step_model(model)
    k, lp, max_new = cfg.num_beams, cfg.length_penalty, cfg.max_new_tokens
    state = model.start(prompt_ids, 1)
    live = [BeamHypothesis([], 0.0)]
    done: list[BeamHypothesis] = []

    def done_key(h):
        return (-h.score, h.ids)

    while live:
        logp = _log_softmax(_mask_eos(state.last_logits, eos_id, cfg.suppress_eos))
        cand = np.array([h.sum_logprob for h in live])[:, None] + logp
        rows, toks = np.nonzero(np.isfinite(cand))
        scores = cand[rows, toks]
        # best cumulative log-probability first, ties by lexicographic id sequence
        order = sorted(range(len(rows)),
                       key=lambda j: (-scores[j], live[rows[j]].ids, int(toks[j])))
        new_live, parents = [], []
        for rank, j in enumerate(order):
            parent, tok = live[rows[j]], int(toks[j])
            h = BeamHypothesis(parent.ids + [tok], float(scores[j]))
            if tok == eos_id or len(h) == max_new:
                if rank >= k:
                    continue
                h.finished = True
                h.score = beam_score(h, lp)
                done.append(h)
            elif len(new_live) < k:
                new_live.append(h)
                parents.append(rows[j])
            if len(new_live) >= k and rank >= k - 1:
                break
        done.sort(key=done_key)
        del done[k:]
        live = new_live
        if not live:
            break
        if done:
            bound = max(_best_possible(h, lp, max_new) for h in live)
            if done[0].score > bound:
                break
        state = state.select(parents)
        state.extend([h.ids[-1] for h in live])
    return done


def beam_search(model, prompt_ids, cfg: GenerationConfig) -> TokenSequence:
    done = beam_search_hypotheses(model, prompt_ids, cfg)
    return TokenSequence(done[0].ids)


def generate_ids(model, prompt_ids, cfg: GenerationConfig) -> TokenSequence:
    if cfg.strategy == "greedy":
        return greedy_decode(model, prompt_ids, cfg)
    return beam_search(model, prompt_ids, cfg)


def truncate_baseline(text: str, limit: int) -> str:
    """First ``limit`` characters of ``text`` (code points, never bytes)."""
    if limit < 0:
        raise ValueError("limit must be >= 0")
    return text[:limit]
