"""AdamW training loop with linear/cosine decay and best-validation checkpointing."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, Sample
from .errors import DivergenceError, NumericError
from .loss import LossConfig, weighted_ce
from .model import PAD, Transformer, Vocab, config_hash, pack, save_checkpoint, write_pointer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 3e-4
    weight_decay: float = 0.01
    schedule: str = "linear"
    max_steps: int = 2000
    batch_size: int = 16
    eval_every: int = 200
    seed: int = 0
    precision: str = "single"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if self.schedule not in ("linear", "cosine"):
            raise ValueError(f"schedule must be 'linear' or 'cosine', got {self.schedule!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.eval_every < 1 or self.max_steps % self.eval_every:
            raise ValueError(f"eval_every={self.eval_every} must divide max_steps={self.max_steps}")


@dataclass
class Checkpoint:
    step: int
    params: dict
    val_loss: float
    config_hash: str
    path: str | None = None


@dataclass
class TrainResult:
    best: Checkpoint
    curve: list[dict]
    data_order: list[list[int]] = field(repr=False, default_factory=list)


def lr_at(schedule: str, base_lr: float, step: int, max_steps: int) -> float:
    if not 0 <= step <= max_steps:
        raise ValueError(f"step {step} outside [0, {max_steps}]")
    frac = step / max_steps
    if schedule == "linear":
        return base_lr * (1.0 - frac)
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ValueError(f"unknown schedule {schedule!r}")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, decay_mask=None):
    """In-place AdamW update of ``params`` (name -> array).

    Decay is decoupled: ``p -= lr * wd * p`` separately from the Adam step.
    ``decay_mask`` (name -> bool) exempts parameters from decay.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def make_batch(vocab: Vocab, samples: list[Sample]):
    """Pad packed sequences; returns (inputs, targets, loss mask)."""
    packed = [pack(vocab, s.source, s.reference) for s in samples]
    width = max(len(ids) for ids, _ in packed) - 1
    inputs = np.full((len(packed), width), PAD, dtype=np.int64)
    targets = np.full((len(packed), width), PAD, dtype=np.int64)
    mask = np.zeros((len(packed), width), dtype=bool)
    for row, (ids, sep_at) in enumerate(packed):
        n = len(ids) - 1
        inputs[row, :n] = ids[:-1]
        targets[row, :n] = ids[1:]
        mask[row, sep_at:n] = True
    return inputs, targets, mask


def evaluate_loss(model: Transformer, vocab: Vocab, samples: list[Sample], loss_cfg: LossConfig,
                  batch_size: int = 32) -> float:
    """Mean per-sequence weighted loss over ``samples``."""
    total = 0.0
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x, y, m = make_batch(vocab, chunk)
            logits = model.forward(x)
            total += float(weighted_ce(logits, y, loss_cfg, m).data) * len(chunk)
    return total / len(samples)


def _decay_mask(model: Transformer) -> dict:
    return {k: t.data.ndim >= 2 for k, t in model.params.items()}


def _clip(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= s
    return norm


class _BatchSampler:
    """Epoch-wise shuffled batches from a dedicated RNG stream."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng([seed, 101])
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def next(self) -> list[int]:
        out = []
        while len(out) < self.batch_size:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(self.batch_size - len(out), len(self.order) - self.pos)
            out.extend(int(i) for i in self.order[self.pos:self.pos + take])
            self.pos += take
        return out


def train(model: Transformer, dataset: Dataset, train_cfg: TrainConfig, loss_cfg: LossConfig,
          vocab: Vocab | None = None, run_dir=None, on_eval=None) -> TrainResult:
    """Optimize ``model`` on ``dataset.train``; restore and return the best-val checkpoint.

    With ``run_dir`` set, writes config.json, loss_curve.csv, data_order.txt,
    checkpoints/step-N.ckpt and a best.ckpt pointer.
    """
    vocab = vocab or Vocab()
    if not dataset.train or not dataset.val:
        raise ValueError("training needs non-empty train and validation splits")
    chash = config_hash({"model": asdict(model.config), "train": asdict(train_cfg), "loss": asdict(loss_cfg)})
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps({
            "model": asdict(model.config), "train": asdict(train_cfg), "loss": asdict(loss_cfg),
            "config_hash": chash,
        }, indent=2, sort_keys=True) + "\n")

    sampler = _BatchSampler(len(dataset.train), train_cfg.batch_size, train_cfg.seed)
    state = AdamState()
    decay = _decay_mask(model)
    curve, order_log = [], []
    best: Checkpoint | None = None
    running = []

    for step in range(1, train_cfg.max_steps + 1):
        idx = sampler.next()
        order_log.append(idx)
        x, y, m = make_batch(vocab, [dataset.train[i] for i in idx])
        lr = lr_at(train_cfg.schedule, train_cfg.base_lr, step - 1, train_cfg.max_steps)
        model.zero_grad()
        loss = weighted_ce(model.forward(x, train=True), y, loss_cfg, m)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(step, best.path if best else None)
        loss.backward()
        grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in model.params.items()}
        _clip(grads, train_cfg.max_grad_norm)
        try:
            adamw_step({k: t.data for k, t in model.params.items()}, grads, state, lr,
                       train_cfg.weight_decay, train_cfg.beta1, train_cfg.beta2, train_cfg.eps, decay)
        except NumericError:
            raise DivergenceError(step, best.path if best else None) from None
        running.append(value)

        if step % train_cfg.eval_every == 0:
            val = evaluate_loss(model, vocab, dataset.val, loss_cfg)
            row = {"step": step, "train_loss": float(np.mean(running)), "val_loss": val, "lr": lr}
            running = []
            curve.append(row)
            log.info("step %d train %.4f val %.4f lr %.3g", step, row["train_loss"], val, lr)
            path = None
            if run_dir is not None:
                path = f"checkpoints/step-{step}.ckpt"
                save_checkpoint(run_dir / path, model, vocab,
                                {"step": step, "val_loss": val, "config_hash": chash})
            if best is None or val < best.val_loss:
                best = Checkpoint(step, model.snapshot(), val, chash, path)
                if run_dir is not None:
                    write_pointer(run_dir / "best.ckpt", path)
            if on_eval is not None:
                on_eval(row)

    model.restore(best.params)
    if run_dir is not None:
        write_loss_curve(run_dir / "loss_curve.csv", curve)
        with open(run_dir / "data_order.txt", "w") as fh:
            for step, idx in enumerate(order_log, start=1):
                fh.write(f"{step}\t{' '.join(map(str, idx))}\n")
    return TrainResult(best, curve, order_log)


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_loss", "lr"])
        for row in curve:
            w.writerow([row["step"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])
