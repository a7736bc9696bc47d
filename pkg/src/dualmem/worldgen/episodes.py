"""Episodes: templated instructions, expert trajectories, and spatial QA."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .. import vocab
from ..errors import GenerationError, PlanningError
from .expert import LEFT, RIGHT, STOP, FORWARD, bfs_distances, execute, expert_path
from .layout import EnvironmentLayout, LayoutObject, Room
from .render import FORWARD_VEC, Pose, channel_map, render_observation, sample_pointcloud, world_to_ego

INSTRUCTION_KINDS = ("goto_object", "goto_room", "spatial_relation", "revisit")
QA_CATEGORIES = ("obj_count", "abs_dist", "obj_size", "room_size",
                 "rel_dist", "rel_dir", "route_plan", "appr_order")
NUMERIC_CATEGORIES = ("obj_count", "abs_dist", "obj_size", "room_size")
CHOICE_CATEGORIES = ("rel_dist", "rel_dir", "route_plan", "appr_order")
EXTRA_CATEGORIES = ("support",)
SUCCESS_RADIUS = 1


@dataclass
class Instruction:
    text: str
    tokens: list[int]
    kind: str
    goal: tuple[int, int]
    waypoints: list[tuple[int, int]] = field(default_factory=list)
    referent: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass
class QAItem:
    category: str
    question: str
    answer: str
    options: list[str] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def tokens(self) -> list[int]:
        return vocab.tokenize(self.question)


@dataclass
class Episode:
    episode_id: str
    layout_id: str
    split: str
    start: Pose
    instruction: Instruction
    actions: list[int]
    shortest_path_length: int
    qa: list[QAItem] = field(default_factory=list)
    eval_seed: int | None = None

    @property
    def goal(self) -> tuple[int, int]:
        return self.instruction.goal

    def poses(self, layout: EnvironmentLayout) -> list[Pose]:
        """Pose before each action; the last entry is where STOP is issued."""
        return execute(layout, self.start, self.actions)

    def to_dict(self) -> dict:
        ins = self.instruction
        return {
            "episode_id": self.episode_id,
            "layout_id": self.layout_id,
            "split": self.split,
            "eval_seed": self.eval_seed,
            "start": [self.start.x, self.start.y, self.start.heading],
            "instruction": {"text": ins.text, "kind": ins.kind, "goal": list(ins.goal),
                            "waypoints": [list(w) for w in ins.waypoints], "referent": ins.referent},
            "actions": list(self.actions),
            "shortest_path_length": self.shortest_path_length,
            "qa": [{"category": q.category, "question": q.question, "answer": q.answer,
                    "options": q.options, "meta": q.meta} for q in self.qa],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        ins = d["instruction"]
        instruction = Instruction(ins["text"], vocab.tokenize(ins["text"]), ins["kind"], tuple(ins["goal"]),
                                  [tuple(w) for w in ins["waypoints"]], ins["referent"])
        return cls(d["episode_id"], d["layout_id"], d["split"], Pose(*d["start"]), instruction,
                   list(d["actions"]), d["shortest_path_length"],
                   [QAItem(q["category"], q["question"], q["answer"], q["options"], q["meta"]) for q in d["qa"]],
                   d.get("eval_seed"))


# --------------------------------------------------------------------------
# geometry helpers shared by instructions and QA


def adjacent_free(layout: EnvironmentLayout, obj: LayoutObject) -> list[tuple[int, int]]:
    out = set()
    for x, y in obj.cells:
        for dx, dy in FORWARD_VEC:
            if layout.is_free(x + dx, y + dy):
                out.add((x + dx, y + dy))
    return sorted(out, key=lambda c: (c[1], c[0]))


def nearest_cell(cells, dist: dict) -> tuple[int, int]:
    reachable = [c for c in cells if c in dist]
    if not reachable:
        raise GenerationError("no reachable candidate cell")
    return min(reachable, key=lambda c: (dist[c], c[1], c[0]))


def room_goal(layout: EnvironmentLayout, room: Room) -> tuple[int, int]:
    """Free cell of the room closest to its center (row-major tie-break)."""
    cx, cy = room.center
    cells = [(x, y) for y in range(room.y0, room.y1 + 1) for x in range(room.x0, room.x1 + 1)
             if layout.is_free(x, y)]
    if not cells:
        raise GenerationError(f"room {room.index} has no free cell")
    return min(cells, key=lambda c: ((c[0] - cx) ** 2 + (c[1] - cy) ** 2, c[1], c[0]))


def is_behind(room: Room, obj: LayoutObject, start: Pose) -> bool:
    """Room center lies past the object as seen from the start cell."""
    ox, oy = obj.center
    cx, cy = room.center
    return (cx - ox) * (ox - start.x) + (cy - oy) * (oy - start.y) > 0 and not room.contains(
        int(round(ox)), int(round(oy)))


def unique_classes(layout: EnvironmentLayout) -> list[str]:
    counts: dict[str, int] = {}
    for o in layout.objects:
        counts[o.cls] = counts.get(o.cls, 0) + 1
    return sorted(c for c, n in counts.items() if n == 1)


def unique_rooms(layout: EnvironmentLayout) -> list[Room]:
    kinds = [r.kind for r in layout.rooms]
    return [r for r in layout.rooms if kinds.count(r.kind) == 1]


def visible_objects_by_step(layout: EnvironmentLayout, poses: list[Pose]) -> list[set[int]]:
    chans = channel_map(layout)
    out = []
    for p in poses:
        cells = render_observation(layout, p, channels=chans).visible_world_cells()
        ids = set()
        for o in layout.objects:
            if any(c in cells for c in o.cells):
                ids.add(o.id)
        out.append(ids)
    return out


# --------------------------------------------------------------------------
# instructions


def _random_pose(rng, layout: EnvironmentLayout, cells=None) -> Pose:
    cells = cells if cells is not None else layout.free_cells()
    x, y = cells[int(rng.integers(len(cells)))]
    return Pose(x, y, int(rng.integers(4)))


def make_instruction(layout: EnvironmentLayout, kind: str, rng: np.random.Generator,
                     start: Pose | None = None) -> tuple[Instruction, Pose]:
    """Templated instruction with its resolved goal; returns (instruction, start pose)."""
    objs = [o for o in layout.objects if o.cls in unique_classes(layout) and adjacent_free(layout, o)]
    if kind == "goto_object":
        if not objs:
            raise GenerationError("no uniquely named object to target")
        obj = objs[int(rng.integers(len(objs)))]
        start = start or _random_pose(rng, layout)
        goal = nearest_cell(adjacent_free(layout, obj), bfs_distances(layout, (start.x, start.y)))
        text = f"go to the {obj.cls}"
        return Instruction(text, vocab.tokenize(text), kind, goal, [], {"object": obj.id}), start
    if kind == "goto_room":
        rooms = unique_rooms(layout)
        if not rooms:
            raise GenerationError("no uniquely named room")
        room = rooms[int(rng.integers(len(rooms)))]
        start = start or _random_pose(rng, layout)
        text = f"go to the {room.kind}"
        return Instruction(text, vocab.tokenize(text), kind, room_goal(layout, room), [],
                           {"room": room.index}), start
    if kind == "spatial_relation":
        start = start or _random_pose(rng, layout)
        options = []
        for obj in objs:
            for kind_name in sorted({r.kind for r in layout.rooms}):
                hits = [r for r in layout.rooms_of(kind_name) if is_behind(r, obj, start)]
                if len(hits) == 1 and not hits[0].contains(start.x, start.y):
                    options.append((obj, hits[0]))
        if not options:
            raise GenerationError("no resolvable spatial relation from this start")
        obj, room = options[int(rng.integers(len(options)))]
        text = f"go to the {room.kind} behind the {obj.cls}"
        return Instruction(text, vocab.tokenize(text), kind, room_goal(layout, room), [],
                           {"room": room.index, "object": obj.id}), start
    if kind == "revisit":
        rooms = unique_rooms(layout)
        pairs = [(r, o) for r in rooms for o in objs if o.room != r.index]
        if not pairs:
            raise GenerationError("no room/object pair for a revisit instruction")
        room, obj = pairs[int(rng.integers(len(pairs)))]
        if start is None:
            cells = [c for c in layout.free_cells() if room.contains(*c)]
            start = _random_pose(rng, layout, cells)
        if not room.contains(start.x, start.y):
            raise GenerationError("revisit must start inside the referent room")
        waypoint = nearest_cell(adjacent_free(layout, obj), bfs_distances(layout, (start.x, start.y)))
        text = f"go to the {obj.cls} then go back to the {room.kind} you passed"
        return Instruction(text, vocab.tokenize(text), kind, room_goal(layout, room), [waypoint],
                           {"room": room.index, "object": obj.id}), start
    raise GenerationError(f"unknown instruction kind {kind!r}")


def plan_episode_actions(layout: EnvironmentLayout, start: Pose, instruction: Instruction) -> tuple[list[int], int]:
    actions: list[int] = []
    length = 0
    pose = start
    for target in instruction.waypoints + [instruction.goal]:
        leg, moved = expert_path(layout, pose, target, stop=False)
        actions += leg
        length += moved
        pose = execute(layout, pose, leg)[-1]
    return actions + [STOP], length


# --------------------------------------------------------------------------
# QA


def _compress_route(actions) -> str:
    words = []
    run = 0
    for a in list(actions) + [None]:
        if a == FORWARD:
            run += 1
            continue
        if run:
            words += ["forward", *str(run)]
            run = 0
        if a == LEFT:
            words.append("left")
        elif a == RIGHT:
            words.append("right")
    return " ".join(words)


def _route_actions(route: str) -> list[int]:
    """Inverse of _compress_route; multi-digit runs are spelled digit by digit."""
    actions: list[int] = []
    run = ""
    for w in route.split() + ["end"]:
        if w.isdigit():
            run += w
            continue
        if run:
            actions += [FORWARD] * int(run)
            run = ""
        if w in ("left", "right"):
            actions.append(LEFT if w == "left" else RIGHT)
    return actions


def _mutate_route(route: str, rng) -> str:
    words = route.split()
    choice = int(rng.integers(3))
    if choice == 0:
        swap = {"left": "right", "right": "left"}
        words = [swap.get(w, w) for w in words]
    elif choice == 1:
        idx = [i for i, w in enumerate(words) if w.isdigit()]
        if idx:
            i = idx[int(rng.integers(len(idx)))]
            words[i] = str(min(9, max(1, int(words[i]) + int(rng.choice([-2, -1, 1, 2])))))
    else:
        turns = [i for i, w in enumerate(words) if w in ("left", "right")]
        if turns:
            del words[turns[int(rng.integers(len(turns)))]]
        else:
            words = ["left"] + words
    return " ".join(words)


def _letter(i: int) -> str:
    return vocab.LETTERS[i]


def make_qa(layout: EnvironmentLayout, episode: Episode, category: str, rng: np.random.Generator) -> QAItem:
    """Question with its exact answer computed from layout and trajectory ground truth."""
    uniq = [o for o in layout.objects if o.cls in unique_classes(layout)]
    poses = episode.poses(layout)
    end = poses[-1]
    if category == "obj_count":
        classes = sorted({o.cls for o in layout.objects})
        if not classes:
            raise GenerationError("layout has no objects to count")
        cls = classes[int(rng.integers(len(classes)))]
        return QAItem(category, f"how many {cls} are there", str(len(layout.objects_of(cls))),
                      meta={"cls": cls})
    if category == "abs_dist":
        pairs = [(a, b) for a, b in itertools.combinations(uniq, 2)
                 if math.dist(a.center, b.center) >= 1.0]
        if not pairs:
            raise GenerationError("no object pair for a distance question")
        a, b = pairs[int(rng.integers(len(pairs)))]
        ans = int(math.floor(math.dist(a.center, b.center) + 0.5))   # half up, not banker's rounding
        return QAItem(category, f"what is the distance between the {a.cls} and the {b.cls}", str(ans),
                      meta={"a": a.id, "b": b.id})
    if category == "obj_size":
        if not uniq:
            raise GenerationError("no uniquely named object")
        o = uniq[int(rng.integers(len(uniq)))]
        return QAItem(category, f"what is the size of the {o.cls}", str(o.area), meta={"object": o.id})
    if category == "room_size":
        rooms = unique_rooms(layout)
        if not rooms:
            raise GenerationError("no uniquely named room")
        r = rooms[int(rng.integers(len(rooms)))]
        return QAItem(category, f"what is the size of the {r.kind}", str(r.area), meta={"room": r.index})
    if category == "rel_dist":
        for _ in range(50):
            if len(uniq) < 3:
                break
            idx = rng.permutation(len(uniq))[: min(len(uniq), 5)]
            ref, cands = uniq[idx[0]], [uniq[i] for i in idx[1:]]
            d = [math.dist(ref.center, c.center) for c in cands]
            best = int(np.argmin(d))
            if sum(abs(x - d[best]) < 1e-9 for x in d) == 1:
                opts = [c.cls for c in cands]
                q = f"which is closest to the {ref.cls} " + " ".join(
                    f"{_letter(i)} {c}" for i, c in enumerate(opts))
                return QAItem(category, q, _letter(best), opts, meta={"ref": ref.id,
                                                                     "cands": [c.id for c in cands]})
        raise GenerationError("no unambiguous relative-distance question")
    if category == "rel_dir":
        options = ["front", "back", "left", "right"]
        cands = []
        for o in uniq:
            f, l = world_to_ego(end, *o.center)
            if abs(abs(f) - abs(l)) >= 0.5:
                cands.append((o, f, l))
        if not cands:
            raise GenerationError("no object with an unambiguous direction")
        o, f, l = cands[int(rng.integers(len(cands)))]
        label = ("front" if f > 0 else "back") if abs(f) > abs(l) else ("right" if l > 0 else "left")
        q = f"standing at the end facing forward where is the {o.cls} " + " ".join(
            f"{_letter(i)} {w}" for i, w in enumerate(options))
        return QAItem(category, q, _letter(options.index(label)), options, meta={"object": o.id})
    if category == "route_plan":
        dist = bfs_distances(layout, (end.x, end.y))
        cands = []
        for o in uniq:
            adj = [c for c in adjacent_free(layout, o) if c in dist and dist[c] > 0]
            if adj:
                acts, _ = expert_path(layout, end, nearest_cell(adj, dist), stop=False)
                route = _compress_route(acts)
                if len(route.split()) <= 8:
                    cands.append((o, route))
        if not cands:
            raise GenerationError("no short route to describe")
        o, route = cands[int(rng.integers(len(cands)))]
        targets = set(adjacent_free(layout, o))
        opts = {route}
        for _ in range(40):
            if len(opts) == 4:
                break
            wrong = _mutate_route(route, rng)
            # a distractor that still ends next to the object would be a second correct option
            end_cell = execute(layout, end, _route_actions(wrong))[-1]
            if (end_cell.x, end_cell.y) not in targets:
                opts.add(wrong)
        if len(opts) < 2:
            raise GenerationError("could not build route distractors")
        opts = sorted(opts)
        rng.shuffle(opts)
        q = f"which route reaches the {o.cls} " + " ".join(f"{_letter(i)} {r}" for i, r in enumerate(opts))
        return QAItem(category, q, _letter(opts.index(route)), opts, meta={"object": o.id})
    if category == "appr_order":
        seen = visible_objects_by_step(layout, poses)
        first: dict[int, int] = {}
        for t, ids in enumerate(seen):
            for i in ids:
                first.setdefault(i, t)
        by_class = [(o, first[o.id]) for o in uniq if o.id in first]
        for _ in range(50):
            if len(by_class) < 3:
                break
            idx = rng.permutation(len(by_class))[:3]
            trio = [by_class[i] for i in idx]
            if len({t for _, t in trio}) < 3:
                continue
            order = tuple(o.cls for o, _ in sorted(trio, key=lambda p: p[1]))
            perms = [p for p in itertools.permutations(order) if p != order]
            picks = [perms[i] for i in rng.permutation(len(perms))[:3]] + [order]
            picks = [picks[i] for i in rng.permutation(4)]
            q = "in which order do these appear " + " ".join(
                f"{_letter(i)} {' '.join(p)}" for i, p in enumerate(picks))
            return QAItem(category, q, _letter(picks.index(order)), [" ".join(p) for p in picks],
                          meta={"objects": [o.id for o, _ in trio]})
        raise GenerationError("fewer than three objects with distinct first sightings")
    if category == "support":
        held = [o for o in layout.objects if o.support is not None]
        held = [o for o in held if o.cls in unique_classes(layout)]
        if not held:
            raise GenerationError("no supported object")
        o = held[int(rng.integers(len(held)))]
        return QAItem(category, f"what is supporting the {o.cls}", layout.objects[o.support].cls,
                      meta={"object": o.id})
    raise GenerationError(f"unknown QA category {category!r}")


# --------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeConfig:
    kind_weights: tuple[float, ...] = (0.4, 0.25, 0.1, 0.25)
    min_path_length: int = 3
    qa_per_episode: int = 2
    max_tries: int = 100


def make_episode(layout: EnvironmentLayout, episode_id: str, split: str, rng: np.random.Generator,
                 config: EpisodeConfig | None = None, eval_seed: int | None = None) -> Episode:
    cfg = config or EpisodeConfig()
    weights = np.asarray(cfg.kind_weights, dtype=float)
    for _ in range(cfg.max_tries):
        kind = INSTRUCTION_KINDS[int(rng.choice(len(INSTRUCTION_KINDS), p=weights / weights.sum()))]
        try:
            instruction, start = make_instruction(layout, kind, rng)
            actions, length = plan_episode_actions(layout, start, instruction)
        except (GenerationError, PlanningError):
            continue
        if length < cfg.min_path_length:
            continue
        ep = Episode(episode_id, layout.layout_id, split, start, instruction, actions, length,
                     eval_seed=eval_seed)
        cats = list(QA_CATEGORIES)
        for i in rng.permutation(len(cats)):
            if len(ep.qa) >= cfg.qa_per_episode:
                break
            try:
                ep.qa.append(make_qa(layout, ep, cats[i], rng))
            except (GenerationError, PlanningError):
                continue
        return ep
    raise GenerationError(f"could not generate an episode on {layout.layout_id}")


def episode_observations(layout: EnvironmentLayout, episode: Episode):
    """Per-step observations and cumulative point clouds along the expert path."""
    chans = channel_map(layout)
    observations, clouds = [], []
    seen: set = set()
    for pose in episode.poses(layout):
        obs = render_observation(layout, pose, channels=chans)
        seen |= obs.visible_world_cells()
        observations.append(obs)
        clouds.append(sample_pointcloud(layout, pose, seen, channels=chans))
    return observations, clouds
