"""Closed-loop rollouts and the navigation / QA metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import vocab
from ..errors import DataError
from ..policy import PolicyModel, Variant
from ..worldgen.episodes import CHOICE_CATEGORIES, NUMERIC_CATEGORIES, SUCCESS_RADIUS, Episode, QAItem
from ..worldgen.expert import STOP, apply_action
from ..worldgen.layout import EnvironmentLayout
from ..worldgen.render import Pose, channel_map, render_observation, sample_pointcloud
from .data import EpisodeCache, StepInput, collate

MRA_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def max_rollout_steps(episode: Episode) -> int:
    return max(20, 4 * episode.shortest_path_length)


def near(a: tuple[int, int], b: tuple[int, int], radius: int = SUCCESS_RADIUS) -> bool:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1])) <= radius


@dataclass
class RolloutState:
    episode: Episode
    layout: EnvironmentLayout
    pose: Pose
    max_steps: int
    history: list[int] = field(default_factory=list)
    seen: set = field(default_factory=set)
    path_length: int = 0
    next_waypoint: int = 0
    done: bool = False
    reason: str = ""
    observation: object = None
    cloud: object = None
    poses: list = field(default_factory=list)

    @property
    def step(self) -> int:
        return len(self.history)


@dataclass
class RolloutResult:
    episode_id: str
    success: bool
    shortest_path_length: int
    path_length: int
    actions: list[int]
    reason: str
    poses: list


class ExpertReplayAgent:
    """Replays the stored expert actions (an oracle)."""

    def act(self, states: list[RolloutState]) -> list[int]:
        return [s.episode.actions[s.step] if s.step < len(s.episode.actions) else STOP for s in states]


class ConstantAgent:
    def __init__(self, action: int):
        self.action = action

    def act(self, states):
        return [self.action for _ in states]


class ModelAgent:
    """Greedy policy: one batched forward per step, argmax over action tokens."""

    def __init__(self, model: PolicyModel, variant: Variant):
        self.model = model
        self.variant = variant

    def act(self, states: list[RolloutState]) -> list[int]:
        samples = [StepInput(s.episode.instruction.tokens, s.observation.semantic, s.observation.depth,
                             s.cloud.points, s.history, None, s.episode.episode_id) for s in states]
        batch = collate(samples, self.model.cfg.max_traj_len, teacher_forcing=False)
        self.model.eval()
        return [int(a) for a in self.model.act(batch, self.variant)]


def _observe(state: RolloutState, channels) -> None:
    obs = render_observation(state.layout, state.pose, channels=channels)
    state.seen |= obs.visible_world_cells()
    state.observation = obs
    state.cloud = sample_pointcloud(state.layout, state.pose, state.seen, channels=channels)


def rollout_many(agent, episodes: list[Episode], layouts: dict[str, EnvironmentLayout],
                 max_steps: int | None = None) -> list[RolloutResult]:
    """Run every episode to STOP or its step limit; agents see all active episodes at once."""
    chans = {lid: channel_map(lay) for lid, lay in layouts.items()}
    states = []
    for ep in episodes:
        lay = layouts[ep.layout_id]
        limit = max_steps if max_steps is not None else max_rollout_steps(ep)
        st = RolloutState(ep, lay, ep.start, limit)
        st.poses.append(ep.start)
        states.append(st)
    while True:
        active = [s for s in states if not s.done]
        for s in active:
            if s.step >= s.max_steps:
                s.done, s.reason = True, "max_steps"
        active = [s for s in active if not s.done]
        if not active:
            break
        for s in active:
            _observe(s, chans[s.episode.layout_id])
        actions = agent.act(active)
        for s, a in zip(active, actions):
            s.history.append(int(a))
            if a == STOP:
                s.done, s.reason = True, "stop"
                continue
            s.pose, moved = apply_action(s.layout, s.pose, int(a))
            s.path_length += int(moved)
            s.poses.append(s.pose)
            wps = s.episode.instruction.waypoints
            if s.next_waypoint < len(wps) and near((s.pose.x, s.pose.y), wps[s.next_waypoint]):
                s.next_waypoint += 1
    results = []
    for s in states:
        ep = s.episode
        wps = ep.instruction.waypoints
        # a start already next to the first waypoint counts as having visited it
        visited = s.next_waypoint
        if visited == 0 and wps and near((ep.start.x, ep.start.y), wps[0]):
            visited = 1
        ok = (s.reason == "stop" and near((s.pose.x, s.pose.y), ep.goal) and visited >= len(wps))
        results.append(RolloutResult(ep.episode_id, bool(ok), ep.shortest_path_length, s.path_length,
                                     list(s.history), s.reason, list(s.poses)))
    return results


def rollout(agent, episode: Episode, layout: EnvironmentLayout, max_steps: int | None = None) -> RolloutResult:
    return rollout_many(agent, [episode], {episode.layout_id: layout}, max_steps)[0]


def compute_spl(results) -> tuple[float, float]:
    """(SR, SPL) over records with ``success``, ``shortest_path_length`` and ``path_length``.

    Records may be RolloutResult objects or (success, L, P) tuples.
    """
    succ, spl = [], []
    for r in results:
        if isinstance(r, tuple):
            s, L, P = r
        else:
            s, L, P = r.success, r.shortest_path_length, r.path_length
        if L < 0 or P < 0:
            raise DataError(f"negative path length in result record: L={L}, P={P}")
        s = float(bool(s))
        succ.append(s)
        spl.append(s if L == 0 else s * L / max(P, L))
    if not succ:
        raise DataError("no episodes to score")
    return float(np.mean(succ)), float(np.mean(spl))


def mra_score(pred: float, truth: float) -> float:
    rel = abs(pred - truth) / truth
    return sum(rel < round(1.0 - t, 2) for t in MRA_THRESHOLDS) / len(MRA_THRESHOLDS)


def _parse_number(text: str) -> float | None:
    try:
        v = float(text)
    except (TypeError, ValueError):
        return None
    return v if math.isfinite(v) else None


@dataclass
class QAMetrics:
    per_category: dict[str, float]
    avg: float
    counts: dict[str, int]
    unparseable: int


def compute_qa_metrics(items) -> QAMetrics:
    """ACC for multiple choice, MRA for numeric answers; Avg over the standard categories present.

    ``items`` is a list of (QAItem, predicted answer string).  Unparseable
    predictions score 0 and are counted.
    """
    scores: dict[str, list[float]] = {}
    bad = 0
    for qa, pred in items:
        pred = "" if pred is None else str(pred).strip()
        if qa.category in NUMERIC_CATEGORIES:
            truth = float(qa.answer)
            if truth <= 0:
                raise DataError(f"numeric answer must be positive, got {qa.answer}")
            val = _parse_number(pred)
            if val is None:
                bad += 1
                s = 0.0
            else:
                s = mra_score(val, truth)
        else:
            if qa.category in CHOICE_CATEGORIES and pred.lower() not in vocab.LETTERS:
                bad += 1
            s = float(pred.lower() == qa.answer.lower())
        scores.setdefault(qa.category, []).append(s)
    per = {c: float(np.mean(v)) for c, v in sorted(scores.items())}
    standard = [per[c] for c in NUMERIC_CATEGORIES + CHOICE_CATEGORIES if c in per]
    avg = float(np.mean(standard)) if standard else float("nan")
    return QAMetrics(per, avg, {c: len(v) for c, v in sorted(scores.items())}, bad)


def answer_questions(model: PolicyModel, variant: Variant, episodes: list[Episode], cache: EpisodeCache,
                     batch_size: int = 32) -> list[tuple[QAItem, str]]:
    """Greedy answers for every QA item, asked at the end of the expert trajectory."""
    jobs = [(ep, i) for ep in episodes for i in range(len(ep.qa))]
    out = []
    model.eval()
    for k in range(0, len(jobs), batch_size):
        chunk = jobs[k:k + batch_size]
        samples = [cache.qa_step(ep, i) for ep, i in chunk]
        for s in samples:
            s.target = None
        batch = collate(samples, model.cfg.max_traj_len, teacher_forcing=False)
        for (ep, i), ids in zip(chunk, model.generate(batch, variant)):
            out.append((ep.qa[i], vocab.detokenize(ids)))
    return out
