"""EOS-weighted cross-entropy with length rescaling.

For a target sequence of N tokens the loss is

    -(R / N) * sum_n w(y_n) * log softmax(x_n)[y_n]

with ``w = W`` at ground-truth EOS positions, 1 elsewhere, and
``R = N / (N + W - 1)``. The per-position coefficients ``R * w / N`` then sum to
one, so the weighted loss stays a convex combination of token losses. With
``W = 1`` it is the ordinary mean cross-entropy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptySequenceError, NumericError, ShapeError
from .model import EOS, TokenSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    eos_weight: float = 1.0
    eos_token_id: int = EOS

    def __post_init__(self):
        if not self.eos_weight >= 1.0:
            raise ValueError(f"eos_weight must be >= 1, got {self.eos_weight}")


def rescale_factor(n: int, eos_weight: float) -> float:
    if n < 1:
        raise EmptySequenceError("rescale factor undefined for an empty target sequence")
    return n / (n + eos_weight - 1.0)


def effective_weights(targets, eos_weight: float, eos_id: int = EOS, mask=None) -> np.ndarray:
    """Per-position loss coefficients ``R * w(y_n) / N``.

    Masked-out positions get 0 and do not count towards N. A sequence with no
    EOS is weighted uniformly (R = 1).
    """
    if isinstance(targets, TokenSequence):
        targets = targets.ids
    y = np.asarray(targets)
    keep = np.ones(y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise EmptySequenceError("no unmasked target positions")
    is_eos = (y == eos_id) & keep
    if not is_eos.any():
        log.warning("target sequence has no EOS; using unweighted mean cross-entropy")
        return keep / float(n)
    w = np.where(is_eos, float(eos_weight), 1.0)
    return np.where(keep, rescale_factor(n, eos_weight) * w / n, 0.0)


def _token_nll(logits: np.ndarray, targets: np.ndarray):
    """Per-position negative log-likelihood and softmax, in float64."""
    x = logits.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    z = e.sum(axis=-1, keepdims=True)
    logp = np.take_along_axis(x, targets[..., None], axis=-1)[..., 0] - np.log(z[..., 0])
    return -logp, e / z


def _check(logits: np.ndarray, targets: np.ndarray):
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not align with targets {targets.shape}")
    if np.isnan(logits).any():
        raise NumericError("NaN in logits")
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id outside vocabulary of size {v}")


def weighted_ce(logits: T.Tensor, targets, cfg: LossConfig, mask=None) -> T.Tensor:
    """Weighted loss of one sequence (logits [N, V]) or a batch (logits [B, N, V]).

    Batches are pooled as the mean of per-sequence losses. ``mask`` marks the
    positions that belong to the target (True) versus prompt or padding.
    """
    if isinstance(targets, TokenSequence):
        targets = targets.ids
    y = np.asarray(targets, dtype=np.int64)
    _check(logits.data, y)
    batched = y.ndim == 2
    ys = y if batched else y[None]
    masks = np.ones(ys.shape, bool) if mask is None else np.asarray(mask, bool).reshape(ys.shape)
    coef = np.stack([
        effective_weights(row, cfg.eos_weight, cfg.eos_token_id, m) for row, m in zip(ys, masks)
    ]) / len(ys)
    coef = coef if batched else coef[0]
    nll, probs = _token_nll(logits.data, y)
    value = float((coef * nll).sum())

    def backward(g):
        grad = probs.copy()
        np.put_along_axis(grad, y[..., None], np.take_along_axis(grad, y[..., None], -1) - 1.0, -1)
        grad *= coef[..., None] * float(g)
        return (grad.astype(logits.dtype),)

    return T.custom(np.asarray(value, dtype=logits.dtype), (logits,), backward)


def plain_ce(logits: T.Tensor, targets, mask=None) -> float:
    """Unweighted mean cross-entropy (value only)."""
    y = np.asarray(targets.ids if isinstance(targets, TokenSequence) else targets, dtype=np.int64)
    _check(logits.data, y)
    nll, _ = _token_nll(logits.data, y)
    if mask is None:
        return float(nll.mean())
    m = np.asarray(mask, bool)
    return float(nll[m].mean())


def sequence_loss_value(logits: np.ndarray, targets, cfg: LossConfig, mask=None) -> float:
    """Forward-only weighted loss on raw arrays, for validation."""
    return float(weighted_ce(T.Tensor(logits), targets, cfg, mask).data)
