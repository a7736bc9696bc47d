"""Episodic-trace distance analysis and its plot-data file."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..episodic import DistanceStats, pair_distances, trace_distance_stats
from ..errors import ConfigurationError, DegenerateInputError
from ..policy import PolicyModel, Variant
from ..worldgen.dataset import Dataset
from .data import EpisodeCache, collate
from .report import EVAL_SPLITS

PLOT_HEADER = "pair_type\tdistance"


@dataclass
class TraceAnalysis:
    stats: DistanceStats
    per_layout: dict[str, DistanceStats] = field(default_factory=dict)
    pair_types: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))   # True = intra
    distances: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_traces: int = 0

    def to_dict(self) -> dict:
        def pack(s: DistanceStats) -> dict:
            return {"intra": s.intra, "inter": s.inter, "ratio": s.ratio if s.ratio_defined else None,
                    "ratio_defined": s.ratio_defined}
        d = pack(self.stats)
        d["n_traces"] = self.n_traces
        d["n_pairs"] = int(len(self.distances))
        d["per_layout"] = {k: pack(v) for k, v in sorted(self.per_layout.items())}
        return d

    def write_plot_data(self, path: str | Path) -> Path:
        """Tab-separated rows: pair_type (intra|inter), cosine distance."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            fh.write(PLOT_HEADER + "\n")
            for same, dist in zip(self.pair_types, self.distances):
                fh.write(f"{'intra' if same else 'inter'}\t{dist:.12g}\n")
        return path


def trace_steps(n_actions: int, per_episode: int) -> list[int]:
    """Evenly spaced decision steps along an expert path."""
    k = min(per_episode, n_actions)
    return sorted({int(round(x)) for x in np.linspace(0, n_actions - 1, k)})


def collect_traces(model: PolicyModel, variant: Variant, dataset: Dataset, episodes, cache: EpisodeCache,
                   per_episode: int = 4, batch_size: int = 32):
    """F_episodic vectors along the expert path of each episode: (vectors, episode ids, layout ids)."""
    if variant.no_episodic or not variant.memory:
        raise ConfigurationError("trace analysis needs the episodic pathway enabled")
    jobs = [(ep, t) for ep in episodes for t in trace_steps(len(ep.actions), per_episode)]
    vecs, ids, lids = [], [], []
    model.eval()
    for k in range(0, len(jobs), batch_size):
        chunk = jobs[k:k + batch_size]
        batch = collate([cache.nav_step(ep, t) for ep, t in chunk], model.cfg.max_traj_len, teacher_forcing=False)
        out = model.encode_prefix(batch, variant)
        vecs.append(out.F_episodic.data)
        ids += [ep.episode_id for ep, _ in chunk]
        lids += [ep.layout_id for ep, _ in chunk]
    return np.concatenate(vecs), ids, lids


def analyze_traces(model: PolicyModel, variant: Variant, dataset: Dataset, cache: EpisodeCache | None = None,
                   splits=EVAL_SPLITS, eval_seed: int = 0, per_episode: int = 4) -> TraceAnalysis:
    cache = cache or EpisodeCache(dataset.layouts)
    episodes = [e for s in splits for e in dataset.split(s, eval_seed)]
    vecs, ids, lids = collect_traces(model, variant, dataset, episodes, cache, per_episode)
    stats = trace_distance_stats(list(zip(vecs, ids)))
    per_layout = {}
    for lid in sorted(set(lids)):
        mask = np.array([l == lid for l in lids])
        try:
            per_layout[lid] = trace_distance_stats(list(zip(vecs[mask], np.asarray(ids)[mask])))
        except DegenerateInputError:
            continue
    dist, same = pair_distances(vecs, ids)
    return TraceAnalysis(stats, per_layout, same, dist, len(ids))
