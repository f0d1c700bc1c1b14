"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a node holding its output array, its parent tensors and a
closure that maps the output gradient to parent gradients. ``backward`` walks
the graph once in reverse topological order, so gradient accumulation order is
fixed and results are reproducible bit for bit.
"""
from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

from .errors import NumericError, ShapeError

LAYERNORM_EPS = 1e-5

_node_ids = itertools.count()

DTYPES = {"single": np.float32, "double": np.float64}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no backward graph inside this block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; use 'single' or 'double'") from None
    return np.dtype(precision)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {self.node_id: np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg

    # operator sugar for the handful of ops used inline
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree exactly."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim and min(a.data.ndim, b.data.ndim) != 2:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    if a.data.ndim == b.data.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match a trailing slice of ``a``'s shape (bias)."""
    if a.shape != b.shape and a.shape[a.data.ndim - b.data.ndim:] != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = a.data + b.data

    def backward(g):
        return g, _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.shape[a.data.ndim - b.data.ndim:] != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = a.data * b.data

    def backward(g):
        return g * b.data, _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)

    def backward(g):
        return (g * a.data.dtype.type(c),)

    return _make(out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    d2 = d * d
    inner = c * d * (1.0 + k * d2)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3.0 * k * d2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t**2) * dinner),)

    return _make(out, (x,), backward)


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps=LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply optional gain and bias."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [t for t in (gain, bias) if t is not None]

    def backward(g):
        gx_hat = g * gain.data if gain is not None else g
        n = d.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return _make(out, parents, backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].flat[0]
        raise IndexError(f"token id {int(bad)} outside vocabulary of size {vocab}")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    if out.size != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(out, (x,), backward)


def take(x: Tensor, index: int) -> Tensor:
    """``x[index]`` along the first axis."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(out, (x,), backward)


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    probability zero.
    """
    d = x.data
    if np.isnan(d).any():
        raise NumericError("softmax: NaN input")
    if mask is not None:
        d = np.where(mask, d, -np.inf)
    shifted = d - d.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x)


def causal_attention(qkv: Tensor, n_heads: int, rate: float = 0.0, rng=None) -> Tensor:
    """Fused multi-head causal self-attention.

    ``qkv`` is [B, N, 3*d] holding queries, keys and values side by side;
    returns [B, N, d].
    """
    B, N, three_d = qkv.shape
    d = three_d // 3
    if three_d != 3 * d or d % n_heads:
        raise ShapeError(f"qkv width {three_d} incompatible with {n_heads} heads")
    dh = d // n_heads
    parts = qkv.data.reshape(B, N, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = parts[0], parts[1], parts[2]
    c = qkv.dtype.type(1.0 / math.sqrt(dh))
    s = (q @ k.transpose(0, 1, 3, 2)) * c
    s += np.triu(np.full((N, N), -np.inf, dtype=s.dtype), k=1)
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(axis=-1, keepdims=True)
    keep = None
    if rate > 0.0 and rng is not None:
        keep = (rng.random(p.shape) >= rate).astype(p.dtype) / p.dtype.type(1.0 - rate)
    pd = p * keep if keep is not None else p
    out = (pd @ v).transpose(0, 2, 1, 3).reshape(B, N, d)

    def backward(g):
        go = g.reshape(B, N, n_heads, dh).transpose(0, 2, 1, 3)
        dv = pd.transpose(0, 1, 3, 2) @ go
        dp = go @ v.transpose(0, 1, 3, 2)
        if keep is not None:
            dp *= keep
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= c
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        grad = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, N, three_d)
        return (grad,)

    return _make(out, (qkv,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return _make(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(out, (x,), backward)


def custom(data, parents, backward) -> Tensor:
    """Register an externally defined op (used by fused losses)."""
    return _make(data, parents, backward)
