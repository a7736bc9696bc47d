"""Shortest-path expert over (cell, heading) states."""

from __future__ import annotations

import heapq
from collections import deque

from ..errors import PlanningError
from .layout import EnvironmentLayout
from .render import FORWARD_VEC, Pose

FORWARD, LEFT, RIGHT, STOP = 0, 1, 2, 3
ACTION_NAMES = ("FORWARD", "LEFT", "RIGHT", "STOP")


def apply_action(layout: EnvironmentLayout, pose: Pose, action: int) -> tuple[Pose, bool]:
    """Next pose and whether the agent changed cell.  Bumping a wall is a no-op."""
    if action == LEFT:
        return Pose(pose.x, pose.y, (pose.heading - 1) % 4), False
    if action == RIGHT:
        return Pose(pose.x, pose.y, (pose.heading + 1) % 4), False
    if action == FORWARD:
        nx, ny = pose.forward_cell()
        if layout.is_free(nx, ny):
            return Pose(nx, ny, pose.heading), True
    return pose, False


def bfs_distances(layout: EnvironmentLayout, source: tuple[int, int]) -> dict[tuple[int, int], int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        x, y = queue.popleft()
        for dx, dy in FORWARD_VEC:
            n = (x + dx, y + dy)
            if n not in dist and layout.is_free(*n):
                dist[n] = dist[(x, y)] + 1
                queue.append(n)
    return dist


def _cost_to_go(layout: EnvironmentLayout, goal: tuple[int, int]) -> dict[tuple[int, int, int], tuple[int, int]]:
    """Lexicographic (moves, turns) cost from every state to the goal cell."""
    best: dict[tuple[int, int, int], tuple[int, int]] = {}
    heap = [((0, 0), goal[0], goal[1], h) for h in range(4)]
    heapq.heapify(heap)
    while heap:
        cost, x, y, h = heapq.heappop(heap)
        if (x, y, h) in best:
            continue
        best[(x, y, h)] = cost
        moves, turns = cost
        # predecessors: turning into h from h-1 / h+1, or stepping forward into (x, y)
        for ph in ((h + 1) % 4, (h - 1) % 4):
            if (x, y, ph) not in best:
                heapq.heappush(heap, ((moves, turns + 1), x, y, ph))
        dx, dy = FORWARD_VEC[h]
        px, py = x - dx, y - dy
        if layout.is_free(px, py) and (px, py, h) not in best:
            heapq.heappush(heap, ((moves + 1, turns), px, py, h))
    return best


def expert_path(layout: EnvironmentLayout, start: Pose, goal: tuple[int, int],
                stop: bool = True) -> tuple[list[int], int]:
    """Actions along a shortest cell path with the fewest turns.

    Ties break toward FORWARD, then LEFT.  Returns (actions, cells moved).
    """
    if not layout.is_free(start.x, start.y) or not layout.is_free(*goal):
        raise PlanningError(f"start {start} or goal {goal} is not free space")
    ctg = _cost_to_go(layout, goal)
    state = (start.x, start.y, start.heading)
    if state not in ctg:
        raise PlanningError(f"goal {goal} unreachable from {start}")
    actions: list[int] = []
    moved = 0
    pose = start
    while (pose.x, pose.y) != goal:
        here = ctg[(pose.x, pose.y, pose.heading)]
        for a in (FORWARD, LEFT, RIGHT):
            nxt, stepped = apply_action(layout, pose, a)
            if a == FORWARD and not stepped:
                continue
            c = ctg.get((nxt.x, nxt.y, nxt.heading))
            step_cost = (1, 0) if a == FORWARD else (0, 1)
            if c is not None and (c[0] + step_cost[0], c[1] + step_cost[1]) == here:
                actions.append(a)
                moved += stepped
                pose = nxt
                break
        else:  # pragma: no cover - cost table is consistent by construction
            raise PlanningError("expert lost the optimal path")
    if stop:
        actions.append(STOP)
    return actions, moved


def execute(layout: EnvironmentLayout, start: Pose, actions) -> list[Pose]:
    """Poses visited before each action, plus the final pose."""
    poses = [start]
    for a in actions:
        if a == STOP:
            break
        poses.append(apply_action(layout, poses[-1], a)[0])
    return poses
