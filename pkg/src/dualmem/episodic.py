"""Episodic memory: trace formation from geometry and trajectory, and its contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numerics as T
from .errors import BatchCompositionError, DegenerateInputError
from .numerics.nn import Linear, Module
from .numerics.tensor import MASK_VALUE, Tensor
from .spatial import CrossAttention, WorldEmbedding, info_nce


@dataclass
class EpisodicTrace:
    Q_epi: Tensor
    F_episodic: Tensor
    episode_id: str
    step: int


def masked_pool(x: Tensor, mask: np.ndarray | None, mode: str = "mean") -> Tensor:
    """(B, n, D) -> (B, D) over rows where ``mask`` is true."""
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise DegenerateInputError("pooling over zero rows")
    if mode == "mean":
        w = (mask / counts[:, None])[:, :, None]
        return T.tsum(x * w, axis=1)
    if mode == "max":
        return T.tmax(x + np.where(mask, 0.0, MASK_VALUE)[:, :, None], axis=1)
    raise ValueError(f"unknown pooling {mode!r}")


class EpisodicMemory(Module):
    """The query Linear(2D -> D) and the attention read of the world embedding."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.query = Linear(2 * d, d, rng)
        self.attn = CrossAttention(d, rng)

    def form_query(self, pcd: Tensor, pcd_mask, traj: Tensor, traj_mask, pooling: str = "mean") -> Tensor:
        geo = masked_pool(pcd, pcd_mask, pooling)
        how = masked_pool(traj, traj_mask, "mean")
        return self.query(T.concat([geo, how], axis=-1))

    def form_trace(self, Q_epi: Tensor, world: WorldEmbedding) -> Tensor:
        """(B, D) queries -> (B, D) traces read from E_world."""
        out = self.attn(T.reshape(Q_epi, (Q_epi.shape[0], 1, Q_epi.shape[1])), world.E_world)
        return T.reshape(out, Q_epi.shape)


def form_query(F_pcd_seq, F_traj: Tensor, memory: EpisodicMemory, pooling: str = "mean") -> Tensor:
    """Single-sample query: pool every point of every observed step, pool the trajectory."""
    if isinstance(F_pcd_seq, Tensor):
        F_pcd_seq = [F_pcd_seq]
    F_pcd_seq = [f for f in F_pcd_seq if f.shape[0] > 0]
    if not F_pcd_seq or F_traj.shape[0] == 0:
        raise DegenerateInputError("episodic query needs at least one point and one trajectory row")
    pts = T.concat(F_pcd_seq, axis=0)
    q = memory.form_query(T.reshape(pts, (1,) + pts.shape), None,
                          T.reshape(F_traj, (1,) + F_traj.shape), None, pooling)
    return q[0]


def form_trace(Q_epi: Tensor, world: WorldEmbedding, memory: EpisodicMemory) -> Tensor:
    return memory.form_trace(T.reshape(Q_epi, (1, Q_epi.shape[-1])), world)[0]


def episodic_infonce(F_epi: Tensor, trace_ids, pool: Tensor, pool_ids, tau: float,
                     rng: np.random.Generator | None = None, positives=None) -> Tensor:
    """Batched form of :func:`episodic_loss`.

    For trace i the positive is one same-episode pooled grounded feature
    (drawn uniformly unless ``positives`` is given); the denominator is that
    positive plus every feature from a different episode.
    """
    trace_ids = np.asarray(trace_ids)
    pool_ids = np.asarray(pool_ids)
    same = trace_ids[:, None] == pool_ids[None, :]
    if not (~same).any(axis=1).all():
        raise BatchCompositionError("episodic loss needs negatives from at least one other episode")
    if not same.any(axis=1).all():
        raise BatchCompositionError("a trace has no same-episode positive in the batch")
    if positives is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        positives = np.array([rng.choice(np.flatnonzero(row)) for row in same])
    positives = np.asarray(positives, dtype=np.int64)
    if not same[np.arange(len(positives)), positives].all():
        raise BatchCompositionError("a positive index points at another episode")
    allowed = ~same
    allowed[np.arange(len(positives)), positives] = True
    return info_nce(F_epi, pool, positives, allowed, tau)


def episodic_loss(traces, grounded_pool, tau: float = 0.07, rng=None, positives=None) -> Tensor:
    """``traces``: EpisodicTrace list; ``grounded_pool``: list of (pooled F'_vis, episode id)."""
    if not traces or not grounded_pool:
        raise BatchCompositionError("episodic loss over an empty batch")
    F = T.stack([t.F_episodic for t in traces], axis=0)
    pool = T.stack([g for g, _ in grounded_pool], axis=0)
    return episodic_infonce(F, [t.episode_id for t in traces], pool, [e for _, e in grounded_pool],
                            tau, rng, positives)


class DistanceStats(NamedTuple):
    intra: float
    inter: float
    ratio: float

    @property
    def ratio_defined(self) -> bool:
        return bool(np.isfinite(self.ratio))


def pair_distances(vectors: np.ndarray, ids) -> tuple[np.ndarray, np.ndarray]:
    """Cosine distances over all i < j pairs and a same-episode flag per pair."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if (norms <= 1e-12).any():
        raise DegenerateInputError("zero-norm trace vector")
    u = v / norms[:, None]
    iu, ju = np.triu_indices(len(v), k=1)
    dist = 1.0 - (u[iu] * u[ju]).sum(axis=1)
    ids = np.asarray(ids)
    return dist, ids[iu] == ids[ju]


def trace_distance_stats(traces) -> DistanceStats:
    """Mean cosine distance within and across episodes and their ratio inter/intra.

    The ratio is NaN (``ratio_defined`` false) when the intra mean is zero.
    Accepts EpisodicTrace objects or (vector, episode id) pairs.
    """
    vecs, ids = [], []
    for t in traces:
        if isinstance(t, EpisodicTrace):
            vecs.append(np.asarray(t.F_episodic.data if isinstance(t.F_episodic, Tensor) else t.F_episodic))
            ids.append(t.episode_id)
        else:
            vec, eid = t
            vecs.append(np.asarray(vec.data if isinstance(vec, Tensor) else vec))
            ids.append(eid)
    uniq, counts = np.unique(np.asarray(ids), return_counts=True)
    if len(uniq) < 2 or (counts < 2).all():
        raise DegenerateInputError("distance stats need two episodes and a same-episode pair")
    dist, same = pair_distances(np.stack(vecs), ids)
    dist = np.maximum(dist, 0.0)
    intra = float(dist[same].mean())
    inter = float(dist[~same].mean())
    ratio = inter / intra if intra > 1e-12 else float("nan")
    return DistanceStats(intra, inter, ratio)
