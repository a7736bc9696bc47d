"""Parameter containers and the few layers every model component shares."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


class Module:
    """Attribute-registered parameter tree.

    Any attribute holding a :class:`Tensor` is a parameter; attributes holding
    a Module or a list of Modules are recursed into.  Frozen parameters keep
    ``requires_grad=False`` and stay in the tree so checkpoints carry them.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(glorot(rng, d_in, d_out))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Two linear layers with a GELU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, bias: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over (B, n, D) inputs.

    ``bias`` broadcasts to (B, heads, n_q, n_k) and holds 0 or MASK_VALUE.
    """
    dh = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = T.matmul(qh, T.swap_last(kh)) * (1.0 / np.sqrt(dh))
    weights = T.softmax(scores, axis=-1, bias=bias)
    return merge_heads(T.matmul(weights, vh))


def key_padding_bias(valid: np.ndarray) -> np.ndarray:
    """(B, n) validity mask -> additive bias of shape (B, 1, 1, n)."""
    return np.where(valid, 0.0, T.MASK_VALUE)[:, None, None, :]


class EncoderLayer(Module):
    """Pre-norm bidirectional self-attention block."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.heads = heads
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.ff = MLP(d, d_ff, d, rng)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        d = x.shape[-1]
        h = self.qkv(self.ln1(x))
        q, k, v = h[..., :d], h[..., d:2 * d], h[..., 2 * d:]
        x = x + self.proj(attention(q, k, v, self.heads, bias))
        return x + self.ff(self.ln2(x))
