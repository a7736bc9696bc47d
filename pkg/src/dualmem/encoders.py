"""Input-stream encoders projecting each modality into the shared width D.

Every encoder works on padded batches; the single-sample functions at the
bottom wrap them for direct use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as T
from .errors import ConfigurationError, DegenerateInputError, DimensionError, VocabularyError
from .numerics.nn import MLP, EncoderLayer, LayerNorm, Linear, Module, key_padding_bias, param
from .numerics.tensor import MASK_VALUE, Tensor
from .worldgen.expert import ACTION_NAMES

BEGIN = len(ACTION_NAMES)        # trajectory token standing in for an empty history
COORD_SCALE = 1.0 / 8.0          # cell units -> encoder input scale
DEPTH_SCALE = 1.0 / 8.0


@dataclass
class FeatureBundle:
    H_T: Tensor
    F_vis: Tensor
    F_geo: Tensor
    F_pcd: Tensor
    F_traj: Tensor


def _embed_init(rng, rows: int, d: int) -> np.ndarray:
    return rng.normal(0.0, d ** -0.5, size=(rows, d))


def patchify(grid: np.ndarray, patch_grid: int) -> np.ndarray:
    """(B, k, k, C) -> (B, patch_grid**2, (k/patch_grid)**2 * C), row-major patches."""
    b, k, k2, c = grid.shape
    if k != k2 or k % patch_grid:
        raise ConfigurationError(f"window {k}x{k2} does not split into a {patch_grid}x{patch_grid} patch grid")
    p = k // patch_grid
    x = grid.reshape(b, patch_grid, p, patch_grid, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, patch_grid * patch_grid, p * p * c)


def depth_features(depth: np.ndarray) -> np.ndarray:
    """(B, k, k) depth -> (B, k, k, 3): scaled depth and forward differences.

    Differences use edge replication, so the last row/column has zero gradient.
    """
    d = depth * DEPTH_SCALE
    gx = np.concatenate([d[:, :, 1:], d[:, :, -1:]], axis=2) - d
    gy = np.concatenate([d[:, 1:, :], d[:, -1:, :]], axis=1) - d
    return np.stack([d, gx, gy], axis=-1)


class InstructionEncoder(Module):
    def __init__(self, vocab_size: int, max_len: int, d: int, rng):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.tokens = param(_embed_init(rng, vocab_size, d))
        self.positions = param(_embed_init(rng, max_len, d))

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if (ids < 0).any() or (ids >= self.vocab_size).any():
            raise VocabularyError("instruction token id outside the vocabulary")
        if ids.shape[1] > self.max_len:
            raise DimensionError(f"instruction length {ids.shape[1]} exceeds {self.max_len}")
        return T.embedding(self.tokens, ids) + self.positions[: ids.shape[1]]


class VisualEncoder(Module):
    """Patch MLP over the semantic grid (no positional term)."""

    def __init__(self, window: int, patch_grid: int, channels: int, d: int, rng):
        if window % patch_grid:
            raise ConfigurationError(f"window {window} does not split into {patch_grid} patches per side")
        self.patch_grid = patch_grid
        p = window // patch_grid
        self.mlp = MLP(p * p * channels, d, d, rng)

    def __call__(self, semantic: np.ndarray) -> Tensor:
        return self.mlp(Tensor(patchify(semantic, self.patch_grid)))


class GeometricEncoder(Module):
    """Patch MLP over depth plus its finite-difference gradients."""

    def __init__(self, window: int, patch_grid: int, d: int, rng):
        if window % patch_grid:
            raise ConfigurationError(f"window {window} does not split into {patch_grid} patches per side")
        self.patch_grid = patch_grid
        p = window // patch_grid
        self.mlp = MLP(p * p * 3, d, d, rng)

    def __call__(self, depth: np.ndarray) -> Tensor:
        return self.mlp(Tensor(patchify(depth_features(depth), self.patch_grid)))


class PointCloudEncoder(Module):
    """Per-point MLP fused with a max-pooled global feature."""

    def __init__(self, d: int, rng):
        self.local = MLP(6, d, d, rng)
        self.fuse = Linear(2 * d, d, rng)

    def __call__(self, points: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        b, n, _ = points.shape
        if mask is None:
            mask = np.ones((b, n), dtype=bool)
        if n == 0 or not mask.any(axis=1).all():
            raise DegenerateInputError("point cloud with no points")
        x = points.copy()
        x[..., :2] *= COORD_SCALE
        local = self.local(Tensor(x))
        pad_bias = np.where(mask, 0.0, MASK_VALUE)[:, :, None]
        glob = T.tmax(local + pad_bias, axis=1, keepdims=True)
        glob_rows = glob + np.zeros((b, n, 1))
        out = self.fuse(T.concat([local, glob_rows], axis=-1))
        return out * mask[:, :, None].astype(np.float64)


class TrajectoryEncoder(Module):
    def __init__(self, d: int, layers: int, heads: int, max_len: int, rng, ff_mult: int = 2):
        self.max_len = max_len
        self.actions = param(_embed_init(rng, BEGIN + 1, d))
        self.positions = param(_embed_init(rng, max_len, d))
        self.layers = [EncoderLayer(d, heads, ff_mult * d, rng) for _ in range(layers)]
        self.ln = LayerNorm(d)

    def __call__(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[1] > self.max_len:
            raise DimensionError(f"trajectory length {ids.shape[1]} exceeds {self.max_len}")
        x = T.embedding(self.actions, ids) + self.positions[: ids.shape[1]]
        bias = key_padding_bias(mask)
        for layer in self.layers:
            x = layer(x, bias)
        return self.ln(x)


def trajectory_ids(history, max_len: int) -> list[int]:
    """Action ids for the encoder; an empty history becomes the BEGIN token."""
    hist = list(history)[-max_len:]
    for a in hist:
        if not 0 <= a < len(ACTION_NAMES):
            raise ValueError(f"invalid action id {a}")
    return hist if hist else [BEGIN]


# --------------------------------------------------------------------------
# single-sample entry points


def encode_instruction(tokens, encoder: InstructionEncoder) -> Tensor:
    ids = np.asarray(tokens, dtype=np.int64)[None]
    if ids.shape[1] < 1:
        raise VocabularyError("empty instruction")
    return encoder(ids)[0]


def encode_visual(observation, encoder: VisualEncoder) -> Tensor:
    return encoder(observation.semantic[None])[0]


def encode_geometric(observation, encoder: GeometricEncoder) -> Tensor:
    return encoder(observation.depth[None])[0]


def encode_pointcloud(cloud, encoder: PointCloudEncoder) -> Tensor:
    pts = cloud.points if hasattr(cloud, "points") else np.asarray(cloud)
    if pts.shape[0] == 0:
        raise DegenerateInputError("point cloud with no points")
    return encoder(pts[None])[0]


def encode_trajectory(history, encoder: TrajectoryEncoder) -> Tensor:
    ids = np.array([trajectory_ids(history, encoder.max_len)])
    return encoder(ids, np.ones(ids.shape, dtype=bool))[0]
