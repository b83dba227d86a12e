"""Minimal reverse-mode autodiff over numpy arrays.

The parser network is small enough that a tape with a dozen operations
covers it: matmul, elementwise nonlinearities, layer norm, softmax
attention, embedding gathers, and a masked cross-entropy.  Keeping the
engine in-repo buys three things heavyweight frameworks make awkward:
bitwise-reproducible training runs, an honest finite-difference gradient
audit in float64, and checkpoint/quantization formats with no opaque state.

Every op builds a node graph; ``backward`` walks it once in reverse
topological order.  Dtypes follow the parameters (float64 for gradient
audits, float32 for training, float16 after quantization).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


def fnv1a(data: bytes) -> int:
    """32-bit FNV-1a.  Used for hash bucketing; must be stable across runs
    and platforms, which Python's salted builtin hash is not."""
    h = 0x811C9DC5
    for byte in data:
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple = (),
        backward_fn: Optional[Callable] = None,
        requires_grad: bool = False,
        name: str = "",
    ):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(self.value.dtype, copy=True)
        else:
            self.grad += grad


def parameter(value: np.ndarray, name: str = "") -> Tensor:
    return Tensor(np.ascontiguousarray(value), requires_grad=True, name=name)


def constant(value: np.ndarray, dtype=None) -> Tensor:
    arr = np.asarray(value)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def backward(loss: Tensor) -> None:
    """Reverse pass seeded with d(loss)/d(loss) = 1."""
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ======================================================================
# Arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value + b.value, (a, b))

    def bw(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    out.backward_fn = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value * b.value, (a, b))

    def bw(g):
        a.accumulate(_unbroadcast(g * b.value, a.shape))
        b.accumulate(_unbroadcast(g * a.value, b.shape))

    out.backward_fn = bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.value * a.value.dtype.type(c), (a,))
    out.backward_fn = lambda g: a.accumulate(g * a.value.dtype.type(c))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value - b.value, (a, b))

    def bw(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(-g, b.shape))

    out.backward_fn = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, supporting identical leading batch dimensions."""
    out = Tensor(a.value @ b.value, (a, b))

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        a.accumulate(_unbroadcast(ga, a.shape))
        b.accumulate(_unbroadcast(gb, b.shape))

    out.backward_fn = bw
    return out


# ======================================================================
# Nonlinearities and normalization


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    out = Tensor(y, (a,))
    out.backward_fn = lambda g: a.accumulate(g * (1 - y * y))
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.value))
    y = y.astype(a.value.dtype)
    out = Tensor(y, (a,))
    out.backward_fn = lambda g: a.accumulate(g * y * (1 - y))
    return out


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.value, 0)
    out = Tensor(y, (a,))
    out.backward_fn = lambda g: a.accumulate(g * (a.value > 0))
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = centered * inv
    out = Tensor((norm * gamma.value + beta.value).astype(x.value.dtype), (x, gamma, beta))

    def bw(g):
        gamma.accumulate(_unbroadcast(g * norm, gamma.shape))
        beta.accumulate(_unbroadcast(g, beta.shape))
        gn = g * gamma.value
        gx = inv * (gn - gn.mean(axis=-1, keepdims=True) - norm * (gn * norm).mean(axis=-1, keepdims=True))
        x.accumulate(gx.astype(x.value.dtype))

    out.backward_fn = bw
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(x.value.dtype)
    out = Tensor(y, (x,))

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate((y * (g - dot)).astype(x.value.dtype))

    out.backward_fn = bw
    return out


# ======================================================================
# Shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.value.reshape(shape), (x,))
    out.backward_fn = lambda g: x.accumulate(g.reshape(x.shape))
    return out


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = Tensor(x.value.transpose(axes), (x,))
    out.backward_fn = lambda g: x.accumulate(g.transpose(inverse))
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            t.accumulate(g[tuple(index)])

    out.backward_fn = bw
    return out


# ======================================================================
# Gathers (embedding lookups)


def gather(table: Tensor, idx: np.ndarray) -> Tensor:
    out = Tensor(table.value[idx], (table,))

    def bw(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx, g)
        table.accumulate(gt)

    out.backward_fn = bw
    return out


def gather_mean(table: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted average of table rows: out[n] = sum_k w[n,k] * table[idx[n,k]].

    The workhorse behind hash-bucketed subword embeddings: ``idx`` holds the
    bucket of each subword unit (padded), ``weights`` hold 1/count for real
    units and 0 for padding.
    """
    w = weights.astype(table.value.dtype)
    out_val = np.einsum("nk,nkd->nd", w, table.value[idx])
    out = Tensor(out_val.astype(table.value.dtype), (table,))

    def bw(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx, w[..., None] * g[:, None, :])
        table.accumulate(gt)

    out.backward_fn = bw
    return out


def gather_time(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row time selection: out[b] = x[b, idx[b]]."""
    rows = np.arange(x.shape[0])
    out = Tensor(x.value[rows, idx], (x,))

    def bw(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (rows, idx), g)
        x.accumulate(gx)

    out.backward_fn = bw
    return out


def weighted_pool(x: Tensor, weights: np.ndarray) -> Tensor:
    """Masked mean over time: out[b] = sum_t w[b,t] * x[b,t], rows of w
    summing to one over real positions."""
    w = weights.astype(x.value.dtype)
    out = Tensor(np.einsum("bt,btd->bd", w, x.value).astype(x.value.dtype), (x,))
    out.backward_fn = lambda g: x.accumulate((w[:, :, None] * g[:, None, :]).astype(x.value.dtype))
    return out


# ======================================================================
# Loss


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean token cross-entropy over (N, V) logits.

    ``weights`` zero out padding; the loss divides by the weight sum so
    batches of different effective length stay comparable.
    """
    v = logits.value
    shifted = v - v.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    n = np.arange(v.shape[0])
    w = weights.astype(v.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one unmasked position")
    loss_val = -(w * log_probs[n, targets]).sum() / total
    out = Tensor(np.asarray(loss_val, dtype=v.dtype), (logits,))

    def bw(g):
        probs = np.exp(log_probs)
        grad = probs * w[:, None]
        grad[n, targets] -= w
        logits.accumulate((g * grad / total).astype(v.dtype))

    out.backward_fn = bw
    return out


# ======================================================================
# Optimizer


class Adam:
    """Plain Adam with bias correction, iterating parameters in a fixed
    order so runs with the same seed are bitwise identical."""

    def __init__(self, params: Sequence[Tensor], lr: float = 2e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.value, dtype=np.float64) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1t = 1 - self.beta1**self.t
        b2t = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            update = (self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)).astype(p.value.dtype)
            p.value -= update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
