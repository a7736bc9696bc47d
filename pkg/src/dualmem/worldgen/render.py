"""Egocentric observations, visibility, and the cumulative point cloud.

Frames: world cells are (x, y) with y growing southward; headings are
0=north, 1=east, 2=south, 3=west.  An egocentric offset (f, l) is f cells
forward and l cells to the right of the agent.  Window cell (row, col) holds
offset f = AGENT_ROW - row, l = col - AGENT_COL, so the agent sits at the
window center and faces row 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import PoseError
from .layout import OBJECT_CLASSES, ROOM_TYPES, WALL, EnvironmentLayout

WINDOW = 16
AGENT_ROW = WINDOW // 2
AGENT_COL = WINDOW // 2

# semantic channels: wall, one per object class, one per room floor type, door floor
CH_WALL = 0
CH_OBJECT = {c: 1 + i for i, c in enumerate(OBJECT_CLASSES)}
CH_ROOM = {r: 1 + len(OBJECT_CLASSES) + i for i, r in enumerate(ROOM_TYPES)}
CH_DOOR = 1 + len(OBJECT_CLASSES) + len(ROOM_TYPES)
N_CHANNELS = CH_DOOR + 1

FORWARD_VEC = ((0, -1), (1, 0), (0, 1), (-1, 0))

# 3-dim appearance code per semantic channel, all entries in [0, 1]
APPEARANCE = np.array([
    [0.50, 0.50, 0.50],  # wall
    [0.80, 0.10, 0.10], [0.10, 0.60, 0.90], [0.55, 0.35, 0.15], [0.95, 0.75, 0.10],
    [0.20, 0.20, 0.20], [0.40, 0.80, 0.30], [0.70, 0.20, 0.70], [1.00, 1.00, 0.60],
    [0.90, 0.90, 0.80], [0.60, 0.45, 0.30], [0.75, 0.70, 0.95], [0.85, 1.00, 1.00],
    [0.30, 0.30, 0.45],  # room floors
    [0.05, 0.05, 0.05],  # door
])


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: int

    def forward_cell(self) -> tuple[int, int]:
        dx, dy = FORWARD_VEC[self.heading]
        return self.x + dx, self.y + dy


def ego_to_world(pose: Pose, f, l):
    """Egocentric (forward, right) offsets -> world (x, y)."""
    fx, fy = FORWARD_VEC[pose.heading]
    rx, ry = -fy, fx
    return pose.x + f * fx + l * rx, pose.y + f * fy + l * ry


def world_to_ego(pose: Pose, x, y):
    fx, fy = FORWARD_VEC[pose.heading]
    rx, ry = -fy, fx
    dx, dy = x - pose.x, y - pose.y
    return dx * fx + dy * fy, dx * rx + dy * ry


def _round_away(v: float) -> int:
    return int(np.sign(v) * np.floor(abs(v) + 0.5))


def ray_cells(f: int, l: int) -> list[tuple[int, int]]:
    """Egocentric cells strictly between the agent and (f, l).

    The segment between cell centers is sampled at 4 points per cell of
    Chebyshev length; samples are rounded half away from zero so the ray to
    (-f, -l) is the mirror of the ray to (f, l).
    """
    n = 4 * max(abs(f), abs(l))
    cells = []
    for i in range(1, n):
        s = i / n
        c = (_round_away(f * s), _round_away(l * s))
        if c != (0, 0) and c != (f, l) and c not in cells:
            cells.append(c)
    return cells


@lru_cache(maxsize=4)
def _ray_table(k: int):
    rows, cols = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    f = (k // 2 - rows).ravel()
    l = (cols - k // 2).ravel()
    rays = [ray_cells(int(a), int(b)) for a, b in zip(f, l)]
    width = max(1, max(len(r) for r in rays))
    rf = np.zeros((k * k, width), dtype=np.int64)
    rl = np.zeros((k * k, width), dtype=np.int64)
    for i, r in enumerate(rays):
        for j, (a, b) in enumerate(r):
            rf[i, j], rl[i, j] = a, b
    # padding entries point at the agent's own cell, which is never a wall
    return f, l, rf, rl


@dataclass
class Observation:
    semantic: np.ndarray   # (k, k, C) one-hot or all-zero
    depth: np.ndarray      # (k, k) Chebyshev distance, 0 where unseen
    visible: np.ndarray    # (k, k) bool
    pose: Pose

    def visible_world_cells(self) -> set[tuple[int, int]]:
        k = self.visible.shape[0]
        rows, cols = np.nonzero(self.visible)
        xs, ys = ego_to_world(self.pose, k // 2 - rows, cols - k // 2)
        return {(int(x), int(y)) for x, y in zip(xs, ys)}


def _cell_channel(layout: EnvironmentLayout, x: int, y: int, doors: set) -> int:
    v = int(layout.grid[y, x])
    if v == WALL:
        return CH_WALL
    if v > 0:
        return CH_OBJECT[layout.objects[v - 1].cls]
    if (x, y) in doors:
        return CH_DOOR
    return CH_ROOM[layout.rooms[int(layout.room_map[y, x])].kind]


def channel_map(layout: EnvironmentLayout) -> np.ndarray:
    """Semantic channel index for every world cell."""
    doors = set(layout.doors)
    out = np.zeros((layout.height, layout.width), dtype=np.int64)
    for y in range(layout.height):
        for x in range(layout.width):
            out[y, x] = _cell_channel(layout, x, y, doors)
    return out


def visibility_mask(layout: EnvironmentLayout, pose: Pose, k: int = WINDOW) -> np.ndarray:
    f, l, rf, rl = _ray_table(k)
    tx, ty = ego_to_world(pose, f, l)
    inside = (tx >= 0) & (tx < layout.width) & (ty >= 0) & (ty < layout.height)
    ix, iy = ego_to_world(pose, rf, rl)
    ok = (ix >= 0) & (ix < layout.width) & (iy >= 0) & (iy < layout.height)
    opaque = np.ones(ix.shape, dtype=bool)
    opaque[ok] = layout.grid[iy[ok], ix[ok]] == WALL
    return (inside & ~opaque.any(axis=1)).reshape(k, k)


def render_observation(layout: EnvironmentLayout, pose: Pose, k: int = WINDOW,
                       channels: np.ndarray | None = None) -> Observation:
    if not layout.is_free(pose.x, pose.y):
        raise PoseError(f"pose ({pose.x}, {pose.y}) is not a free floor cell")
    if channels is None:
        channels = channel_map(layout)
    visible = visibility_mask(layout, pose, k)
    f, l, _, _ = _ray_table(k)
    tx, ty = ego_to_world(pose, f, l)
    vis = visible.ravel()
    semantic = np.zeros((k * k, N_CHANNELS))
    semantic[np.nonzero(vis)[0], channels[ty[vis], tx[vis]]] = 1.0
    depth = np.where(vis, np.maximum(np.abs(f), np.abs(l)), 0).astype(np.float64)
    return Observation(semantic.reshape(k, k, N_CHANNELS), depth.reshape(k, k), visible, pose)


@dataclass
class PointCloud:
    points: np.ndarray   # (N, 6): lateral, forward, height, appearance x3

    @property
    def count(self) -> int:
        return self.points.shape[0]


def sample_pointcloud(layout: EnvironmentLayout, pose: Pose, visibility, cap: int = 256,
                      channels: np.ndarray | None = None) -> PointCloud:
    """One point per observed world cell, in the agent frame at ``pose``.

    ``visibility`` is the cumulative set of world cells seen so far.  Clouds
    larger than ``cap`` are thinned by evenly spaced selection in the
    deterministic (y, x) cell order.
    """
    if channels is None:
        channels = channel_map(layout)
    cells = sorted(visibility, key=lambda c: (c[1], c[0]))
    if len(cells) > cap:
        keep = np.linspace(0, len(cells) - 1, cap).round().astype(int)
        cells = [cells[i] for i in keep]
    if not cells:
        return PointCloud(np.zeros((0, 6)))
    xs = np.array([c[0] for c in cells])
    ys = np.array([c[1] for c in cells])
    fwd, lat = world_to_ego(pose, xs, ys)
    heights = np.zeros(len(cells))
    for i, (x, y) in enumerate(cells):
        obj = layout.top_object(x, y)
        if obj is not None:
            heights[i] = obj.height
    pts = np.column_stack([lat, fwd, heights, APPEARANCE[channels[ys, xs]]]).astype(np.float64)
    return PointCloud(pts)
