"""Workload generation and the line-delimited episode file format.

File layout (schema version 1), one JSON object per line:

    {"record": "header", "schema_version": 1, "seed": ..., "workload": {...}}
    {"record": "layout", ...EnvironmentLayout.to_dict()}
    {"record": "episode", ...Episode.to_dict()}

Observations and point clouds are not stored; they are re-rendered from the
layout and the expert poses, which is exact because rendering is pure.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .episodes import Episode, EpisodeConfig, make_episode
from .layout import EnvironmentLayout, LayoutConfig, generate_layout

SCHEMA_VERSION = 1
SPLITS = ("train", "val_seen", "val_unseen")

# seed namespaces keep unseen layouts disjoint from training layouts
_SEEN_NS, _UNSEEN_NS, _EPISODE_NS = 11, 29, 47


@dataclass
class Workload:
    seed: int = 0
    n_layouts: int = 8
    episodes_per_layout: int = 25
    n_seen_eval_layouts: int = 4
    n_unseen_layouts: int = 4
    eval_episodes_per_layout: int = 10
    n_eval_seeds: int = 3
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)

    @classmethod
    def from_ratios(cls, seed: int, n_layouts: int, episodes_per_layout: int,
                    ratios: tuple[float, float, float], **kw) -> "Workload":
        """Split ``n_layouts`` into seen/unseen and episodes into train/val_seen."""
        train_r, seen_r, unseen_r = (r / sum(ratios) for r in ratios)
        n_unseen = int(round(unseen_r * n_layouts))
        n_seen = max(1, n_layouts - n_unseen)
        val_seen = int(round(episodes_per_layout * seen_r / max(train_r + seen_r, 1e-12)))
        return cls(seed=seed, n_layouts=n_seen, episodes_per_layout=episodes_per_layout - val_seen,
                   n_seen_eval_layouts=n_seen if val_seen else 0, n_unseen_layouts=n_unseen,
                   eval_episodes_per_layout=max(val_seen, 1), **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    layouts: dict[str, EnvironmentLayout]
    episodes: list[Episode]
    seed: int = 0
    workload: dict = field(default_factory=dict)

    def split(self, name: str, eval_seed: int | None = None) -> list[Episode]:
        return [e for e in self.episodes if e.split == name
                and (eval_seed is None or e.eval_seed == eval_seed)]

    def layout_of(self, episode: Episode) -> EnvironmentLayout:
        return self.layouts[episode.layout_id]


def _layout_seed(seed: int, ns: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, ns, i]).generate_state(1)[0])


def _episode_rng(seed: int, layout_seed: int, split_code: int, eval_seed: int, j: int):
    return np.random.default_rng([seed, _EPISODE_NS, layout_seed, split_code, eval_seed, j])


def generate_dataset(workload: Workload) -> Dataset:
    """Deterministic in ``workload``; episodes are independent given their seeds."""
    w = workload
    layouts: dict[str, EnvironmentLayout] = {}
    seen_ids, unseen_ids = [], []
    for i in range(w.n_layouts):
        s = _layout_seed(w.seed, _SEEN_NS, i)
        lay = generate_layout(s, w.layout, layout_id=f"seen-{i:03d}")
        layouts[lay.layout_id] = lay
        seen_ids.append(lay.layout_id)
    for i in range(w.n_unseen_layouts):
        s = _layout_seed(w.seed, _UNSEEN_NS, i)
        lay = generate_layout(s, w.layout, layout_id=f"unseen-{i:03d}")
        layouts[lay.layout_id] = lay
        unseen_ids.append(lay.layout_id)

    episodes: list[Episode] = []
    for lid in seen_ids:
        lay = layouts[lid]
        for j in range(w.episodes_per_layout):
            rng = _episode_rng(w.seed, lay.seed, 0, 0, j)
            episodes.append(make_episode(lay, f"{lid}/train/{j:04d}", "train", rng, w.episode))
    for e_seed in range(w.n_eval_seeds):
        for split, ids, code in (("val_seen", seen_ids[: w.n_seen_eval_layouts], 1),
                                 ("val_unseen", unseen_ids, 2)):
            for lid in ids:
                lay = layouts[lid]
                for j in range(w.eval_episodes_per_layout):
                    rng = _episode_rng(w.seed, lay.seed, code, e_seed + 1, j)
                    episodes.append(make_episode(lay, f"{lid}/{split}/s{e_seed}/{j:04d}", split, rng,
                                                 w.episode, eval_seed=e_seed))
    return Dataset(layouts, episodes, w.seed, w.to_dict())


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        header = {"record": "header", "schema_version": SCHEMA_VERSION, "seed": dataset.seed,
                  "workload": dataset.workload}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for lay in dataset.layouts.values():
            fh.write(json.dumps({"record": "layout", **lay.to_dict()}, sort_keys=True) + "\n")
        for ep in dataset.episodes:
            fh.write(json.dumps({"record": "episode", **ep.to_dict()}, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    layouts: dict[str, EnvironmentLayout] = {}
    episodes: list[Episode] = []
    seed, workload = 0, {}
    with Path(path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("record")
            if kind == "header":
                if rec["schema_version"] != SCHEMA_VERSION:
                    raise ValueError(f"unsupported episode schema version {rec['schema_version']}")
                seed, workload = rec["seed"], rec["workload"]
            elif kind == "layout":
                lay = EnvironmentLayout.from_dict(rec)
                layouts[lay.layout_id] = lay
            elif kind == "episode":
                episodes.append(Episode.from_dict(rec))
    return Dataset(layouts, episodes, seed, workload)
