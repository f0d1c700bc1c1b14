"""Character vocabulary and a small decoder-only transformer.

Training sequences are packed as ``BOS source SEP target EOS``. The autodiff
``forward`` is used for training; ``InferenceState`` runs the same network in
plain numpy with a key/value cache for decoding.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import EncodingError, SequenceLengthError, ShapeError

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIAL_IDS = (PAD, BOS, EOS, SEP)
CHARSET = "".join(chr(c) for c in range(32, 127))


class Vocab:
    """Printable ASCII mapped to ids 4.. with PAD/BOS/EOS/SEP reserved below."""

    pad_id, bos_id, eos_id, sep_id = PAD, BOS, EOS, SEP

    def __init__(self, chars: str = CHARSET):
        if len(set(chars)) != len(chars):
            raise ValueError("vocabulary characters must be unique")
        self.chars = chars
        self._to_id = {c: i + len(SPECIAL_IDS) for i, c in enumerate(chars)}

    def __len__(self):
        return len(self.chars) + len(SPECIAL_IDS)

    def __eq__(self, other):
        return isinstance(other, Vocab) and other.chars == self.chars

    def encode(self, text: str) -> "TokenSequence":
        ids = []
        for offset, ch in enumerate(text):
            try:
                ids.append(self._to_id[ch])
            except KeyError:
                raise EncodingError(ch, offset) from None
        return TokenSequence(ids, len(text))

    def decode(self, ids) -> str:
        n = len(SPECIAL_IDS)
        return "".join(self.chars[i - n] for i in ids if i >= n)


@dataclass
class TokenSequence:
    ids: list[int]
    char_len: int = -1

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]
        if self.char_len < 0:
            self.char_len = sum(1 for i in self.ids if i >= len(SPECIAL_IDS))

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    ff_mult: int = 4
    max_seq_len: int = 512
    vocab_size: int = len(CHARSET) + len(SPECIAL_IDS)
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_ff(self):
        return self.d_model * self.ff_mult

    def parameter_count(self) -> int:
        d, f, v = self.d_model, self.d_ff, self.vocab_size
        per_layer = 4 * d + (4 * d * d + 4 * d) + (d * f + f) + (f * d + d)
        return v * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + d * v + v


def pack(vocab: Vocab, source: str, target: str | None = None) -> tuple[list[int], int]:
    """Return packed ids and the index of the SEP token.

    With ``target=None`` the result is the generation prompt ``BOS source SEP``.
    """
    ids = [BOS] + vocab.encode(source).ids + [SEP]
    sep_at = len(ids) - 1
    if target is not None:
        ids += vocab.encode(target).ids + [EOS]
    return ids, sep_at


class Transformer:
    def __init__(self, config: ModelConfig, dtype="single"):
        self.config = config
        self.dtype = T.resolve_dtype(dtype)
        self.params: dict[str, T.Tensor] = {}
        self._dropout_rng = np.random.default_rng([config.seed, 1])
        self._init_params(np.random.default_rng([config.seed, 0]))

    def _init_params(self, rng):
        c = self.config
        d, f = c.d_model, c.d_ff
        std = 0.02
        resid_std = std / math.sqrt(2 * c.n_layers)

        def p(name, shape, kind):
            if kind == "normal":
                arr = rng.normal(0.0, std, size=shape)
            elif kind == "resid":
                arr = rng.normal(0.0, resid_std, size=shape)
            elif kind == "ones":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            self.params[name] = T.Tensor(arr.astype(self.dtype), requires_grad=True, name=name)

        p("tok_emb", (c.vocab_size, d), "normal")
        p("pos_emb", (c.max_seq_len, d), "normal")
        for i in range(c.n_layers):
            pre = f"layers.{i}."
            p(pre + "ln1.g", (d,), "ones")
            p(pre + "ln1.b", (d,), "zeros")
            p(pre + "attn.wqkv", (d, 3 * d), "normal")
            p(pre + "attn.bqkv", (3 * d,), "zeros")
            p(pre + "attn.wo", (d, d), "resid")
            p(pre + "attn.bo", (d,), "zeros")
            p(pre + "ln2.g", (d,), "ones")
            p(pre + "ln2.b", (d,), "zeros")
            p(pre + "ff.w1", (d, f), "normal")
            p(pre + "ff.b1", (f,), "zeros")
            p(pre + "ff.w2", (f, d), "resid")
            p(pre + "ff.b2", (d,), "zeros")
        p("ln_f.g", (d,), "ones")
        p("ln_f.b", (d,), "zeros")
        p("head.w", (d, c.vocab_size), "normal")
        p("head.b", (c.vocab_size,), "zeros")

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def forward(self, ids, train: bool = False) -> T.Tensor:
        """Logits for ``ids`` of shape [N] or [B, N]; returns [N, V] or [B, N, V]."""
        if isinstance(ids, TokenSequence):
            ids = ids.ids
        ids = np.asarray(ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        B, N = ids.shape
        c = self.config
        if N > c.max_seq_len:
            raise SequenceLengthError(f"sequence of length {N} exceeds max_seq_len={c.max_seq_len}")
        P = self.params
        H = c.n_heads
        rate = c.dropout_rate if train else 0.0
        rng = self._dropout_rng

        x = T.add(T.embedding(P["tok_emb"], ids), T.embedding(P["pos_emb"], np.arange(N)))
        x = T.dropout(x, rate, rng)
        for i in range(c.n_layers):
            pre = f"layers.{i}."
            h = T.layernorm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
            qkv = T.add(T.matmul(h, P[pre + "attn.wqkv"]), P[pre + "attn.bqkv"])
            y = T.causal_attention(qkv, H, rate, rng)
            y = T.add(T.matmul(y, P[pre + "attn.wo"]), P[pre + "attn.bo"])
            x = T.add(x, T.dropout(y, rate, rng))

            h = T.layernorm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            h = T.gelu(T.add(T.matmul(h, P[pre + "ff.w1"]), P[pre + "ff.b1"]))
            h = T.add(T.matmul(h, P[pre + "ff.w2"]), P[pre + "ff.b2"])
            x = T.add(x, T.dropout(h, rate, rng))
        x = T.layernorm(x, P["ln_f.g"], P["ln_f.b"])
        logits = T.add(T.matmul(x, P["head.w"]), P["head.b"])
        if squeeze:
            logits = T.reshape(logits, (N, c.vocab_size))
        return logits

    # -- parameter (de)serialization --------------------------------------

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.params.values()])

    def load_flat_parameters(self, flat: np.ndarray):
        flat = np.asarray(flat)
        if flat.size != self.num_parameters():
            raise ShapeError(f"expected {self.num_parameters()} parameters, got {flat.size}")
        offset = 0
        for t in self.params.values():
            n = t.data.size
            t.data = flat[offset:offset + n].reshape(t.shape).astype(self.dtype)
            offset += n

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for k, arr in snap.items():
            self.params[k].data = arr.copy()

    def start(self, prompt_ids, copies: int = 1) -> "InferenceState":
        return InferenceState.prefill(self, prompt_ids, copies)


def _np_layernorm(x, g, b, eps=T.LAYERNORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + x.dtype.type(eps)) * g + b


def _np_gelu(x):
    c = x.dtype.type(math.sqrt(2.0 / math.pi))
    return 0.5 * x * (1.0 + np.tanh(c * x * (1.0 + x.dtype.type(0.044715) * x * x)))


@dataclass
class InferenceState:
    """Key/value cache for a set of rows decoding from a shared prompt."""

    model: Transformer
    keys: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    length: int = 0
    last_logits: np.ndarray | None = None

    @classmethod
    def prefill(cls, model, prompt_ids, copies=1):
        state = cls(model)
        ids = np.asarray(list(prompt_ids), dtype=np.int64)[None, :]
        c = model.config
        H, dh = c.n_heads, c.d_model // c.n_heads
        state.keys = [np.zeros((1, H, 0, dh), model.dtype) for _ in range(c.n_layers)]
        state.values = [np.zeros((1, H, 0, dh), model.dtype) for _ in range(c.n_layers)]
        state._run(ids)
        if copies != 1:
            state = state.select(np.zeros(copies, dtype=np.int64))
        return state

    def select(self, rows) -> "InferenceState":
        rows = np.asarray(rows, dtype=np.int64)
        return InferenceState(
            self.model,
            [k[rows] for k in self.keys],
            [v[rows] for v in self.values],
            self.length,
            self.last_logits[rows],
        )

    def extend(self, tokens) -> np.ndarray:
        """Append one token per row; returns next-token logits [rows, V]."""
        self._run(np.asarray(tokens, dtype=np.int64).reshape(-1, 1))
        return self.last_logits

    def _run(self, ids):
        m = self.model
        c = m.config
        P = {k: t.data for k, t in m.params.items()}
        B, n = ids.shape
        if self.length + n > c.max_seq_len:
            raise SequenceLengthError(f"sequence of length {self.length + n} exceeds max_seq_len={c.max_seq_len}")
        H, dh = c.n_heads, c.d_model // c.n_heads
        pos = np.arange(self.length, self.length + n)
        x = P["tok_emb"][ids] + P["pos_emb"][pos]
        total = self.length + n
        mask = np.tril(np.ones((n, total), dtype=bool), k=self.length)
        for i in range(c.n_layers):
            pre = f"layers.{i}."
            h = _np_layernorm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
            qkv = (h @ P[pre + "attn.wqkv"] + P[pre + "attn.bqkv"]).reshape(B, n, 3, H, dh).transpose(2, 0, 3, 1, 4)
            q = qkv[0]
            self.keys[i] = np.concatenate([self.keys[i], qkv[1]], axis=2)
            self.values[i] = np.concatenate([self.values[i], qkv[2]], axis=2)
            scores = (q @ self.keys[i].transpose(0, 1, 3, 2)) * x.dtype.type(1.0 / math.sqrt(dh))
            scores = np.where(mask, scores, -np.inf)
            scores = scores - scores.max(axis=-1, keepdims=True)
            att = np.exp(scores)
            att = att / att.sum(axis=-1, keepdims=True)
            y = (att @ self.values[i]).transpose(0, 2, 1, 3).reshape(B, n, c.d_model)
            x = x + (y @ P[pre + "attn.wo"] + P[pre + "attn.bo"])
            h = _np_layernorm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            h = _np_gelu(h @ P[pre + "ff.w1"] + P[pre + "ff.b1"]) @ P[pre + "ff.w2"] + P[pre + "ff.b2"]
            x = x + h
        x = _np_layernorm(x[:, -1], P["ln_f.g"], P["ln_f.b"])
        self.last_logits = x @ P["head.w"] + P["head.b"]
        self.length = total


# -- checkpoint files -------------------------------------------------------

CHECKPOINT_MAGIC = b"EOSLABCK"
CHECKPOINT_VERSION = 1
POINTER_PREFIX = "ref: "


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, model: Transformer, vocab: Vocab, meta: dict | None = None):
    """Write ``MAGIC | u64 header length | JSON header | raw little-endian floats``."""
    flat = model.flat_parameters().astype(model.dtype.newbyteorder("<"))
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "vocab": vocab.chars,
        "dtype": model.dtype.name,
        "num_parameters": int(flat.size),
        "param_shapes": [[k, list(t.shape)] for k, t in model.params.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def write_pointer(path, target):
    Path(path).write_text(f"{POINTER_PREFIX}{target}\n")


def resolve_checkpoint(path) -> Path:
    """Follow pointer files and run directories down to a checkpoint file."""
    path = Path(path)
    if path.is_dir():
        path = path / "best.ckpt"
    with open(path, "rb") as fh:
        head = fh.read(len(CHECKPOINT_MAGIC))
    if head == CHECKPOINT_MAGIC:
        return path
    text = path.read_text().strip()
    if not text.startswith(POINTER_PREFIX):
        raise ValueError(f"{path} is neither a checkpoint nor a pointer file")
    return resolve_checkpoint(path.parent / text[len(POINTER_PREFIX):])


def load_checkpoint(path) -> tuple[Transformer, Vocab, dict]:
    path = resolve_checkpoint(path)
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
        dtype = np.dtype(header["dtype"]).newbyteorder("<")
        flat = np.frombuffer(fh.read(), dtype=dtype)
    model = Transformer(ModelConfig(**header["model_config"]), dtype=np.dtype(header["dtype"]))
    model.load_flat_parameters(flat)
    return model, Vocab(header["vocab"]), header["meta"]
