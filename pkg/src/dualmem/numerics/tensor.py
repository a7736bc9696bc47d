"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one operand requires a gradient.  Outside a tape nothing is recorded,
which is how inference runs.

    with Tape() as tape:
        loss = cross_entropy(model(x), targets)
        tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import DegenerateVectorError, DimensionError

_state = threading.local()

# additive bias used to mask attention/contrastive logits; finite on purpose
MASK_VALUE = -1e30
COSINE_EPS = 1e-12


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records operations in execution order and replays them in reverse."""

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: "Tensor", backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)

    def reset(self) -> None:
        self._nodes.clear()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        tape = active_tape()
        if tape is None:
            raise RuntimeError("backward() called outside of a Tape context")
        tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            tape.record(out, backward)
    return out


def _accum(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add ``g`` into ``t.grad``; ``owned`` means g is a fresh array nobody else holds."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if owned and g.flags.writeable and g.dtype == np.float64 and g.base is None:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape), True)
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape), True)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: _accum(x, g * y))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _result(y, (x,), lambda g: _accum(x, g / (2.0 * y)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: _accum(x, g * (1.0 - y * y)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: _accum(x, g * mask))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation; smooth, so finite-difference checks never hit a kink."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v * v * v)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner), True)

    return _result(y, (x,), backward)


# --------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # stacked rows times one matrix: a single 2-D product is far faster
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.shape), True)
            if b.requires_grad:
                _accum(b, a2.T @ g2, True)

        return _result(out, (a, b), backward)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), True)
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape), True)

    return _result(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: _accum(x, np.transpose(g, inv)))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.shape)))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(x, full)

    return _result(x.data[idx], (x,), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        _accum(weight, full)

    return _result(weight.data[ids], (weight,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, bounds, axis=axis)):
            _accum(t, part)

    return _result(data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# --------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(y, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def tmax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max reduction; tied maxima share the incoming gradient equally."""
    y = x.data.max(axis=axis, keepdims=True)
    hit = x.data == y
    share = hit / hit.sum(axis=axis, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, g * share)

    return _result(y if keepdims else y.squeeze(axis), (x,), backward)


# --------------------------------------------------------------------------
# normalizations and losses


def softmax(x: Tensor, axis: int = -1, bias: np.ndarray | None = None) -> Tensor:
    """Row-max-stabilized softmax; ``bias`` is a constant additive mask."""
    z = x.data if bias is None else x.data + bias
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)), True)

    return _result(y, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1, bias: np.ndarray | None = None) -> Tensor:
    z = x.data if bias is None else x.data + bias
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _result(y, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1, bias: np.ndarray | None = None) -> Tensor:
    """log sum exp(x + bias) along ``axis`` (reduced); ``bias`` masks entries out."""
    z = x.data if bias is None else x.data + bias
    top = z.max(axis=axis, keepdims=True)
    e = np.exp(z - top)
    s = e.sum(axis=axis, keepdims=True)
    y = np.log(s) + top
    p = e / s

    def backward(g):
        _accum(x, np.expand_dims(g, axis) * p)

    return _result(y.squeeze(axis), (x,), backward)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows.

    ``weights`` (0/1 per row) masks padded rows out of both the sum and the
    count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if (targets < 0).any() or (targets >= v).any():
        raise IndexError(f"target index out of range for vocabulary of size {v}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    count = w.sum()
    if count <= 0:
        raise DimensionError("cross_entropy over zero rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, targets]
    loss = float((nll * w).sum() / count)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        _accum(logits, g * p * (w / count)[:, None])

    return _result(np.array(loss), (logits,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            d = x.shape[-1]
            _accum(x, inv / d * (d * gx - gx.sum(-1, keepdims=True)
                                 - xhat * (gx * xhat).sum(-1, keepdims=True)), True)

    return _result(y, (x, gamma, beta), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = COSINE_EPS) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm <= eps).any():
        raise DegenerateVectorError(f"vector norm below {eps} in l2_normalize")
    y = x.data / norm

    def backward(g):
        _accum(x, (g - y * (g * y).sum(axis=axis, keepdims=True)) / norm)

    return _result(y, (x,), backward)


def cosine_similarity(u, v) -> Tensor:
    """u.v / (|u| |v|) along the last axis."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    return tsum(mul(l2_normalize(u), l2_normalize(v)), axis=-1)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)
