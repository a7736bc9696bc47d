"""AdamW with linear warmup and cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingAborted
from .tensor import Tensor


@dataclass
class OptimizerState:
    peak_lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    warmup_steps: int = 500
    total_steps: int = 1000
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def schedule_lr(step: int, state: OptimizerState) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to 0 at ``total_steps``."""
    step = min(max(step, 0), state.total_steps)
    if state.warmup_steps > 0 and step < state.warmup_steps:
        return state.peak_lr * step / state.warmup_steps
    span = state.total_steps - state.warmup_steps
    if span <= 0:
        return state.peak_lr
    progress = (step - state.warmup_steps) / span
    return state.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, decay: dict[str, bool] | None = None) -> float:
    """In-place AdamW update of ``params``; returns the learning rate used.

    Weight decay is decoupled (applied to the weights, not the gradient) and
    skipped for names mapped to False in ``decay``.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingAborted(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.t += 1
    lr = schedule_lr(state.t, state)
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and (decay is None or decay.get(name, True)):
            p -= lr * state.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr


class AdamW:
    """Binds :func:`optimizer_step` to a set of named trainable tensors."""

    def __init__(self, named_params, state: OptimizerState):
        self.params = {n: p for n, p in named_params if p.requires_grad}
        self.state = state
        # vectors (biases, norms) are not decayed
        self.decay = {n: p.ndim >= 2 for n, p in self.params.items()}

    def step(self) -> float:
        data = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        return optimizer_step(data, grads, self.state, self.decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def tensors(self) -> dict[str, Tensor]:
        return self.params
