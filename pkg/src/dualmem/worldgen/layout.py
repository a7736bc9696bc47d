"""Seeded floor-plan generation: rooms by binary partition, doors, furniture."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..errors import GenerationError

ROOM_TYPES = ("kitchen", "living_room", "bedroom", "bathroom", "hallway")
OBJECT_CLASSES = ("sofa", "sink", "desk", "chair", "laptop", "table", "bed", "lamp")

WALL = -1
FLOOR = 0

# which rooms each class may be placed in
AFFINITY = {
    "sofa": ("living_room",),
    "sink": ("kitchen", "bathroom"),
    "desk": ("bedroom", "living_room"),
    "chair": ("kitchen", "living_room", "bedroom", "hallway"),
    "laptop": ("bedroom", "living_room"),
    "table": ("kitchen", "living_room"),
    "bed": ("bedroom",),
    "lamp": ("living_room", "bedroom", "hallway"),
}
FOOTPRINT = {"sofa": 2, "bed": 2, "table": 2, "desk": 2}
HEIGHT = {"sofa": 1.0, "sink": 1.0, "desk": 1.0, "chair": 1.0, "laptop": 0.5,
          "table": 1.0, "bed": 1.0, "lamp": 2.0}
SUPPORTERS = ("desk", "table")


@dataclass
class LayoutConfig:
    width: int = 16
    height: int = 16
    n_rooms: int = 4
    n_objects: int = 10
    min_room_side: int = 3
    door_width: int = 2
    unique_room_types: bool = True
    support_prob: float = 0.5

    def validate(self) -> None:
        if self.width < 8 or self.height < 8:
            raise GenerationError(f"layout must be at least 8x8, got {self.width}x{self.height}")
        if self.n_rooms < 2:
            raise GenerationError("layout needs at least 2 rooms")
        if self.unique_room_types and self.n_rooms > len(ROOM_TYPES):
            raise GenerationError(f"{self.n_rooms} rooms cannot have unique types")
        interior = (self.width - 2) * (self.height - 2)
        # every object needs its own cells plus clearance for the walkable graph
        if self.n_objects * 4 > interior:
            raise GenerationError(f"{self.n_objects} objects do not fit a {interior}-cell interior")


@dataclass
class Room:
    index: int
    kind: str
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclass
class LayoutObject:
    id: int
    cls: str
    cells: list[tuple[int, int]]
    height: float
    room: int
    support: int | None = None

    @property
    def center(self) -> tuple[float, float]:
        xs, ys = zip(*self.cells)
        return sum(xs) / len(xs), sum(ys) / len(ys)

    @property
    def area(self) -> int:
        return len(self.cells)


@dataclass
class EnvironmentLayout:
    layout_id: str
    seed: int
    width: int
    height: int
    grid: np.ndarray            # [y, x]: WALL, FLOOR, or top object id + 1
    room_map: np.ndarray        # [y, x]: room index, -1 on walls and door cells
    rooms: list[Room]
    objects: list[LayoutObject]
    doors: list[tuple[int, int]] = field(default_factory=list)

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_wall(self, x: int, y: int) -> bool:
        return not self.in_bounds(x, y) or self.grid[y, x] == WALL

    def is_free(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and self.grid[y, x] == FLOOR

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(self.grid == FLOOR)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def top_object(self, x: int, y: int) -> LayoutObject | None:
        v = int(self.grid[y, x])
        return self.objects[v - 1] if v > 0 else None

    def room_at(self, x: int, y: int) -> Room | None:
        idx = int(self.room_map[y, x])
        return self.rooms[idx] if idx >= 0 else None

    def objects_of(self, cls: str) -> list[LayoutObject]:
        return [o for o in self.objects if o.cls == cls]

    def rooms_of(self, kind: str) -> list[Room]:
        return [r for r in self.rooms if r.kind == kind]

    def ascii(self) -> str:
        """Human-readable dump: '#' wall, '.' floor, '+' door, letters for objects."""
        glyph = {"sofa": "S", "sink": "K", "desk": "D", "chair": "c", "laptop": "l",
                 "table": "T", "bed": "B", "lamp": "p"}
        doors = set(self.doors)
        lines = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                v = int(self.grid[y, x])
                if v == WALL:
                    row.append("#")
                elif v > 0:
                    row.append(glyph[self.objects[v - 1].cls])
                else:
                    row.append("+" if (x, y) in doors else ".")
            lines.append("".join(row))
        legend = [f"room {r.index}: {r.kind} x[{r.x0},{r.x1}] y[{r.y0},{r.y1}]" for r in self.rooms]
        return "\n".join(lines + legend)

    def to_dict(self) -> dict:
        return {
            "layout_id": self.layout_id,
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "grid": self.grid.tolist(),
            "room_map": self.room_map.tolist(),
            "rooms": [[r.index, r.kind, r.x0, r.y0, r.x1, r.y1] for r in self.rooms],
            "objects": [{"id": o.id, "cls": o.cls, "cells": [list(c) for c in o.cells],
                         "height": o.height, "room": o.room, "support": o.support}
                        for o in self.objects],
            "doors": [list(d) for d in self.doors],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentLayout":
        return cls(
            layout_id=d["layout_id"],
            seed=d["seed"],
            width=d["width"],
            height=d["height"],
            grid=np.array(d["grid"], dtype=np.int16),
            room_map=np.array(d["room_map"], dtype=np.int16),
            rooms=[Room(*r) for r in d["rooms"]],
            objects=[LayoutObject(o["id"], o["cls"], [tuple(c) for c in o["cells"]], o["height"],
                                  o["room"], o["support"]) for o in d["objects"]],
            doors=[tuple(c) for c in d["doors"]],
        )


def free_components(grid: np.ndarray) -> int:
    """Number of 4-connected components of FLOOR cells."""
    h, w = grid.shape
    seen = np.zeros_like(grid, dtype=bool)
    count = 0
    for y0 in range(h):
        for x0 in range(w):
            if grid[y0, x0] != FLOOR or seen[y0, x0]:
                continue
            count += 1
            seen[y0, x0] = True
            queue = deque([(x0, y0)])
            while queue:
                x, y = queue.popleft()
                for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                    if 0 <= nx < w and 0 <= ny < h and grid[ny, nx] == FLOOR and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((nx, ny))
    return count


def _partition(rng, cfg: LayoutConfig) -> list[tuple[int, int, int, int]]:
    rects = [(1, 1, cfg.width - 2, cfg.height - 2)]
    m = cfg.min_room_side
    while len(rects) < cfg.n_rooms:
        order = sorted(range(len(rects)), key=lambda i: -((rects[i][2] - rects[i][0] + 1)
                                                          * (rects[i][3] - rects[i][1] + 1)))
        for i in order:
            x0, y0, x1, y1 = rects[i]
            w, h = x1 - x0 + 1, y1 - y0 + 1
            can_v, can_h = w >= 2 * m + 1, h >= 2 * m + 1
            if not (can_v or can_h):
                continue
            vertical = can_v and (not can_h or w > h or (w == h and rng.random() < 0.5))
            if vertical:
                wx = int(rng.integers(x0 + m, x1 - m + 1))
                new = [(x0, y0, wx - 1, y1), (wx + 1, y0, x1, y1)]
            else:
                wy = int(rng.integers(y0 + m, y1 - m + 1))
                new = [(x0, y0, x1, wy - 1), (x0, wy + 1, x1, y1)]
            rects[i:i + 1] = new
            break
        else:
            raise GenerationError(f"cannot partition {cfg.width}x{cfg.height} into {cfg.n_rooms} rooms")
    return rects


def _door_candidates(room_map: np.ndarray) -> dict[tuple[int, int], list[tuple[int, int]]]:
    """Wall cells separating exactly two rooms, keyed by the (a, b) room pair."""
    h, w = room_map.shape
    out: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            if room_map[y, x] != -1:
                continue
            for (ax, ay), (bx, by) in (((x - 1, y), (x + 1, y)), ((x, y - 1), (x, y + 1))):
                a, b = int(room_map[ay, ax]), int(room_map[by, bx])
                if a >= 0 and b >= 0 and a != b:
                    out.setdefault((min(a, b), max(a, b)), []).append((x, y))
    return out


def _carve_doors(rng, grid, room_map, n_rooms, door_width) -> list[tuple[int, int]]:
    candidates = _door_candidates(room_map)
    pairs = sorted(candidates)
    rng.shuffle(pairs)
    parent = list(range(n_rooms))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    doors = []
    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        parent[ra] = rb
        cells = sorted(candidates[(a, b)])
        # runs of consecutive cells along the shared wall
        start = int(rng.integers(len(cells)))
        chosen = [cells[start]]
        for c in cells[start + 1:]:
            if len(chosen) >= door_width:
                break
            px, py = chosen[-1]
            if abs(c[0] - px) + abs(c[1] - py) == 1:
                chosen.append(c)
        for x, y in chosen:
            grid[y, x] = FLOOR
            doors.append((x, y))
    if len({find(i) for i in range(n_rooms)}) != 1:
        raise GenerationError("room adjacency graph is disconnected")
    return doors


def _place_objects(rng, cfg, grid, room_map, rooms, doors) -> list[LayoutObject]:
    near_door = set()
    for x, y in doors:
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                near_door.add((x + dx, y + dy))
    objects: list[LayoutObject] = []
    kinds = {r.kind for r in rooms}
    placeable = [c for c in OBJECT_CLASSES if any(k in kinds for k in AFFINITY[c])]
    attempts = 0
    while len(objects) < cfg.n_objects:
        attempts += 1
        if attempts > 200 * cfg.n_objects:
            raise GenerationError(f"could not place {cfg.n_objects} objects")
        cls = placeable[int(rng.integers(len(placeable)))]
        if cls == "laptop" and rng.random() < cfg.support_prob:
            hosts = [o for o in objects if o.cls in SUPPORTERS
                     and not any(p.support == o.id for p in objects)]
            if hosts:
                host = hosts[int(rng.integers(len(hosts)))]
                cell = host.cells[int(rng.integers(len(host.cells)))]
                oid = len(objects)
                objects.append(LayoutObject(oid, cls, [cell], host.height + HEIGHT[cls], host.room, host.id))
                grid[cell[1], cell[0]] = oid + 1
                continue
        options = [r for r in rooms if r.kind in AFFINITY[cls]]
        if not options:
            continue
        room = options[int(rng.integers(len(options)))]
        x = int(rng.integers(room.x0, room.x1 + 1))
        y = int(rng.integers(room.y0, room.y1 + 1))
        cells = [(x, y)]
        if FOOTPRINT.get(cls, 1) == 2:
            dx, dy = ((1, 0), (0, 1))[int(rng.integers(2))]
            cells.append((x + dx, y + dy))
        if any(not room.contains(cx, cy) or grid[cy, cx] != FLOOR or (cx, cy) in near_door
               for cx, cy in cells):
            continue
        oid = len(objects)
        for cx, cy in cells:
            grid[cy, cx] = oid + 1
        if free_components(grid) != 1 or not _has_free_neighbor(grid, cells):
            for cx, cy in cells:
                grid[cy, cx] = FLOOR
            continue
        objects.append(LayoutObject(oid, cls, cells, HEIGHT[cls], room.index))
    return objects


def _has_free_neighbor(grid, cells) -> bool:
    for x, y in cells:
        for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if grid[ny, nx] == FLOOR:
                return True
    return False


def generate_layout(seed: int, config: LayoutConfig | None = None, layout_id: str | None = None) -> EnvironmentLayout:
    """Deterministic layout for ``(seed, config)``."""
    cfg = config or LayoutConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    rects = _partition(rng, cfg)
    grid = np.full((cfg.height, cfg.width), WALL, dtype=np.int16)
    room_map = np.full((cfg.height, cfg.width), -1, dtype=np.int16)
    if cfg.unique_room_types:
        kinds = [ROOM_TYPES[i] for i in rng.permutation(len(ROOM_TYPES))[:len(rects)]]
    else:
        kinds = [ROOM_TYPES[int(i)] for i in rng.integers(len(ROOM_TYPES), size=len(rects))]
    rooms = []
    for i, ((x0, y0, x1, y1), kind) in enumerate(zip(rects, kinds)):
        grid[y0:y1 + 1, x0:x1 + 1] = FLOOR
        room_map[y0:y1 + 1, x0:x1 + 1] = i
        rooms.append(Room(i, kind, x0, y0, x1, y1))
    doors = _carve_doors(rng, grid, room_map, len(rooms), cfg.door_width)
    objects = _place_objects(rng, cfg, grid, room_map, rooms, doors)
    if free_components(grid) != 1:
        raise GenerationError("free space is disconnected")
    return EnvironmentLayout(layout_id or f"layout-{seed}", int(seed), cfg.width, cfg.height,
                             grid, room_map, rooms, objects, doors)
