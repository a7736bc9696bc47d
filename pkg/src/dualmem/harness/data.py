"""Training samples drawn from episodes, and their collation into model batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import vocab
from ..encoders import trajectory_ids
from ..policy import Batch
from ..worldgen.episodes import SUCCESS_RADIUS, Episode, episode_observations
from ..worldgen.expert import FORWARD, LEFT, RIGHT, STOP, apply_action, execute, expert_path
from ..worldgen.layout import EnvironmentLayout
from ..worldgen.render import channel_map, render_observation, sample_pointcloud


@dataclass
class StepInput:
    """Everything the model sees at one decision point."""

    tokens: list[int]
    semantic: np.ndarray
    depth: np.ndarray
    points: np.ndarray
    history: list[int]
    target: list[int] | None = None     # output ids; one action, or answer tokens ending in EOS
    episode_id: str = ""
    nav: bool = True


class EpisodeCache:
    """Rendered observations and cumulative clouds along each expert path."""

    def __init__(self, layouts: dict[str, EnvironmentLayout]):
        self.layouts = layouts
        self._store: dict[str, tuple] = {}
        self._seen: dict[str, list] = {}
        self._channels: dict[str, np.ndarray] = {}

    def get(self, ep: Episode):
        hit = self._store.get(ep.episode_id)
        if hit is None:
            obs, clouds = episode_observations(self.layouts[ep.layout_id], ep)
            sem = np.stack([o.semantic for o in obs]).astype(np.uint8)
            depth = np.stack([o.depth for o in obs]).astype(np.float32)
            hit = (sem, depth, [c.points for c in clouds])
            self._store[ep.episode_id] = hit
            seen, acc = [], set()
            for o in obs:
                acc = acc | o.visible_world_cells()
                seen.append(acc)
            self._seen[ep.episode_id] = seen
        return hit

    def channels(self, layout_id: str) -> np.ndarray:
        if layout_id not in self._channels:
            self._channels[layout_id] = channel_map(self.layouts[layout_id])
        return self._channels[layout_id]

    def nav_step(self, ep: Episode, t: int) -> StepInput:
        sem, depth, clouds = self.get(ep)
        return StepInput(ep.instruction.tokens, sem[t], depth[t], clouds[t], ep.actions[:t],
                         [ep.actions[t]], ep.episode_id, True)

    def perturbed_step(self, ep: Episode, t: int, rng: np.random.Generator, max_noise: int) -> StepInput:
        """Expert prefix up to step t, then 1..max_noise random moves, labelled by the expert.

        Exposes the policy to states just off the demonstrated path, with the
        action that returns to it.  Waypoints count as visited once the agent
        comes within the success radius, in order, as in closed-loop rollouts.
        """
        self.get(ep)
        layout = self.layouts[ep.layout_id]
        chans = self.channels(ep.layout_id)
        poses = execute(layout, ep.start, ep.actions[:t])
        noise = [int(a) for a in rng.choice((FORWARD, LEFT, RIGHT), size=int(rng.integers(1, max_noise + 1)))]
        seen = set(self._seen[ep.episode_id][t])
        pose = poses[-1]
        for a in noise:
            pose = apply_action(layout, pose, a)[0]
            poses.append(pose)
            seen |= render_observation(layout, pose, channels=chans).visible_world_cells()
        obs = render_observation(layout, pose, channels=chans)
        cloud = sample_pointcloud(layout, pose, seen, channels=chans)
        return StepInput(ep.instruction.tokens, obs.semantic.astype(np.uint8), obs.depth.astype(np.float32),
                         cloud.points, list(ep.actions[:t]) + noise, [expert_action(layout, poses, ep)],
                         ep.episode_id, True)

    def qa_step(self, ep: Episode, i: int) -> StepInput:
        """Questions are asked after the episode, at the final pose with the full history."""
        sem, depth, clouds = self.get(ep)
        qa = ep.qa[i]
        return StepInput(qa.tokens, sem[-1], depth[-1], clouds[-1], ep.actions,
                         vocab.answer_tokens(qa.answer), ep.episode_id, False)


def expert_action(layout: EnvironmentLayout, poses: list, ep: Episode) -> int:
    """Expert action after the pose sequence ``poses`` (start first, current last)."""
    wps = ep.instruction.waypoints
    k = 0
    for p in poses:
        if k < len(wps) and max(abs(p.x - wps[k][0]), abs(p.y - wps[k][1])) <= SUCCESS_RADIUS:
            k += 1
    pose = poses[-1]
    target = wps[k] if k < len(wps) else ep.instruction.goal
    # standing on a pending waypoint cannot happen: the radius check above has already counted it
    if (pose.x, pose.y) == target:
        return STOP
    return expert_path(layout, pose, target, stop=False)[0][0]


def _bucket(n: int, step: int) -> int:
    return -(-n // step) * step if step > 1 else n


def collate(samples: list[StepInput], max_traj_len: int, teacher_forcing: bool = True,
            bucket: bool = True) -> Batch:
    """Pad a list of step inputs into a :class:`Batch`.

    With ``teacher_forcing`` the generated stream is BOS followed by the
    target minus its last token; otherwise it is BOS alone.  ``bucket``
    rounds padded lengths up so that batch shapes repeat across steps,
    which lets the allocator reuse buffers.
    """
    b = len(samples)
    L = _bucket(max(len(s.tokens) for s in samples), 8 if bucket else 1)
    instr = np.zeros((b, L), dtype=np.int64)
    instr_mask = np.zeros((b, L), dtype=bool)
    trajs = [trajectory_ids(s.history, max_traj_len) for s in samples]
    t = min(_bucket(max(len(x) for x in trajs), 16 if bucket else 1), max_traj_len)
    traj = np.zeros((b, t), dtype=np.int64)
    traj_mask = np.zeros((b, t), dtype=bool)
    n = _bucket(max(max(s.points.shape[0] for s in samples), 1), 64 if bucket else 1)
    pts = np.zeros((b, n, 6))
    pts_mask = np.zeros((b, n), dtype=bool)
    if teacher_forcing and all(s.target is not None for s in samples):
        g = max(len(s.target) for s in samples)
    else:
        g = 1
    gen = np.full((b, g), vocab.EOS, dtype=np.int64)
    gen_mask = np.zeros((b, g), dtype=bool)
    targets = np.zeros((b, g), dtype=np.int64)
    for i, s in enumerate(samples):
        instr[i, :len(s.tokens)] = s.tokens
        instr_mask[i, :len(s.tokens)] = True
        traj[i, :len(trajs[i])] = trajs[i]
        traj_mask[i, :len(trajs[i])] = True
        pts[i, :s.points.shape[0]] = s.points
        pts_mask[i, :s.points.shape[0]] = True
        gen[i, 0] = vocab.BOS
        if g > 1 or (s.target is not None and len(s.target) == 1):
            k = len(s.target)
            gen[i, 1:k] = s.target[:-1]
            gen_mask[i, :k] = True
            targets[i, :k] = s.target
        else:
            gen_mask[i, 0] = True
            if s.target is not None:
                targets[i, 0] = s.target[0]
    return Batch(
        instr_ids=instr, instr_mask=instr_mask,
        semantic=np.stack([s.semantic for s in samples]).astype(np.float64),
        depth=np.stack([s.depth for s in samples]).astype(np.float64),
        points=pts, points_mask=pts_mask, traj_ids=traj, traj_mask=traj_mask,
        gen_ids=gen, gen_mask=gen_mask, targets=targets,
        episode_ids=[s.episode_id for s in samples],
        is_nav=np.array([s.nav for s in samples]),
    )
