"""Spatial semantic memory: world embedding, geometric grounding, and its contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as T
from .errors import BatchTooSmallError, DimensionError, EmptyMemoryError
from .numerics.nn import MLP, Module, glorot, param
from .numerics.tensor import MASK_VALUE, Tensor


class CrossAttention(Module):
    """Single-head scaled dot-product attention with learned D x D maps.

    Works on a single (m, D) query against (n, D) keys/values, or batched
    (B, m, D) against (B, n, D) or a shared (n, D) memory.
    """

    def __init__(self, d: int, rng: np.random.Generator, out_scale: float = 1.0):
        self.W_Q = param(glorot(rng, d, d))
        self.W_K = param(glorot(rng, d, d))
        self.W_V = param(glorot(rng, d, d))
        self.W_O = param(glorot(rng, d, d) * out_scale)

    def __call__(self, q: Tensor, kv: Tensor, kv_mask: np.ndarray | None = None) -> Tensor:
        if kv.shape[-2] == 0:
            raise EmptyMemoryError("cross-attention over an empty key set")
        if q.shape[-1] != kv.shape[-1] or q.shape[-1] != self.W_Q.shape[0]:
            raise DimensionError(f"cross-attention width mismatch: {q.shape} vs {kv.shape}")
        d = q.shape[-1]
        Q = T.matmul(q, self.W_Q)
        K = T.matmul(kv, self.W_K)
        V = T.matmul(kv, self.W_V)
        scores = T.matmul(Q, T.swap_last(K)) * (1.0 / np.sqrt(d))
        bias = None
        if kv_mask is not None:
            bias = np.where(kv_mask, 0.0, MASK_VALUE)[..., None, :]
        weights = T.softmax(scores, axis=-1, bias=bias)
        return T.matmul(T.matmul(weights, V), self.W_O)


def cross_attn(q: Tensor, kv: Tensor, attn: CrossAttention) -> Tensor:
    return attn(q, kv)


class WorldEmbedding(Module):
    """The learnable N_w x D concept matrix."""

    def __init__(self, n_world: int, d: int, rng: np.random.Generator):
        if n_world < 1:
            raise ValueError("world embedding needs at least one row")
        self.E_world = param(rng.normal(0.0, d ** -0.5, size=(n_world, d)))

    @property
    def n_world(self) -> int:
        return self.E_world.shape[0]


@dataclass
class GroundedVisual:
    F_vis_prime: Tensor
    episode_id: str | None = None
    step: int | None = None


class Grounding(Module):
    """F'_vis = F_vis + CrossAttn(F_vis, F_geo)."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.attn = CrossAttention(d, rng)

    def __call__(self, F_vis: Tensor, F_geo: Tensor, geo_mask=None) -> Tensor:
        if F_vis.shape[-1] != F_geo.shape[-1]:
            raise DimensionError(f"grounding width mismatch: {F_vis.shape} vs {F_geo.shape}")
        return F_vis + self.attn(F_vis, F_geo, geo_mask)


def ground_semantics(F_vis: Tensor, F_geo: Tensor, grounding: Grounding,
                     episode_id: str | None = None, step: int | None = None) -> GroundedVisual:
    return GroundedVisual(grounding(F_vis, F_geo), episode_id, step)


def pool_tokens(x: Tensor, mode: str = "mean") -> Tensor:
    """(..., n, D) -> (..., D) by token mean or first token."""
    if mode == "mean":
        return T.mean(x, axis=-2)
    if mode == "first":
        return x[..., 0, :]
    raise ValueError(f"unknown pooling {mode!r}")


class ProjectionHeads(Module):
    """Separate heads for the grounded and original branches of the spatial loss."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.grounded = MLP(d, d, d, rng)
        self.original = MLP(d, d, d, rng)


def info_nce(anchors: Tensor, candidates: Tensor, positives, allowed: np.ndarray, tau: float) -> Tensor:
    """Mean over anchors of -log[exp(s_ip/tau) / sum_{j allowed} exp(s_ij/tau)].

    ``s`` is cosine similarity; ``allowed`` (n_anchor, n_cand) marks the
    denominator terms and must include the positive when the loss should stay
    non-negative.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    positives = np.asarray(positives, dtype=np.int64)
    sims = T.matmul(T.l2_normalize(anchors), T.swap_last(T.l2_normalize(candidates)))
    logits = sims * (1.0 / tau)
    rows = np.arange(anchors.shape[0])
    lse = T.logsumexp(logits, axis=-1, bias=np.where(allowed, 0.0, MASK_VALUE))
    pos = logits[rows, positives]
    return T.mean(lse - pos)


def _stack_tokens(items) -> Tensor:
    if isinstance(items, Tensor):
        return items
    rows = [g.F_vis_prime if isinstance(g, GroundedVisual) else g for g in items]
    return T.stack(rows, axis=0)


def spatial_loss(grounded, originals, tau: float = 0.07, *, pooling: str = "mean",
                 heads: ProjectionHeads | None = None, exclude_positive: bool = False) -> Tensor:
    """Contrast each grounded sample with its own original features against the batch.

    ``grounded``/``originals`` are lists of (N_vis, D) tensors (or
    GroundedVisual) or stacked (B, N_vis, D) tensors.
    """
    g = _stack_tokens(grounded)
    o = _stack_tokens(originals)
    b = g.shape[0]
    if b < 2:
        raise BatchTooSmallError(f"spatial loss needs a batch of at least 2, got {b}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    gp, op = pool_tokens(g, pooling), pool_tokens(o, pooling)
    if heads is not None:
        gp, op = heads.grounded(gp), heads.original(op)
    allowed = np.ones((b, b), dtype=bool)
    if exclude_positive:
        np.fill_diagonal(allowed, False)
    return info_nce(gp, op, np.arange(b), allowed, tau)
