"""Memory ablations over several training seeds, with paired significance tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import TrainConfig
from ..errors import DegenerateTestError
from ..policy import PolicyModel, Variant
from ..worldgen.dataset import Dataset
from .data import EpisodeCache
from .report import EVAL_SPLITS, navigation_metrics
from .stats import wilcoxon_signed_rank
from .train import clone_model, finetune, pretrain

# variant name -> TrainConfig switches
ABLATIONS = {
    "full": {},
    "no_spatial": {"no_spatial": True},
    "no_episodic": {"no_episodic": True},
    "no_grounding": {"no_grounding": True},
    "no_trajectory": {"no_trajectory": True},
    "no_geometry": {"no_geometry": True},
}
MEMORY_ABLATIONS = ("no_spatial", "no_episodic", "no_grounding", "no_trajectory")
NO_FINETUNE = "no_finetune"


@dataclass
class AblationTable:
    seeds: list[int]
    variants: list[str]
    rows: list[dict] = field(default_factory=list)      # seed, variant, SR, SPL, per-split SR

    def sr(self, variant: str) -> np.ndarray:
        by_seed = {r["seed"]: r["SR"] for r in self.rows if r["variant"] == variant}
        return np.array([by_seed[s] for s in self.seeds])

    def mean_sr(self) -> dict[str, float]:
        return {v: float(self.sr(v).mean()) for v in self.variants}

    def delta_sr(self) -> dict[str, float]:
        full = self.sr("full")
        return {v: float((full - self.sr(v)).mean()) for v in self.variants}

    def wilcoxon(self) -> dict[str, dict]:
        out = {}
        full = self.sr("full")
        for v in self.variants:
            if v == "full":
                continue
            try:
                w = wilcoxon_signed_rank(list(zip(full, self.sr(v))))
                out[v] = {"W": w.statistic, "p": w.p_value, "n": w.n, "exact": w.exact}
            except DegenerateTestError:
                out[v] = {"W": 0.0, "p": 1.0, "n": 0, "exact": True}
        return out

    def lowest_memory_ablation_per_seed(self) -> list[str]:
        out = []
        for i, _ in enumerate(self.seeds):
            vals = {v: self.sr(v)[i] for v in MEMORY_ABLATIONS if v in self.variants}
            out.append(min(vals, key=lambda k: (vals[k], k)))
        return out

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "variants": self.variants, "rows": self.rows,
                "mean_SR": self.mean_sr(), "delta_SR": self.delta_sr(), "wilcoxon": self.wilcoxon()}


def _score(model: PolicyModel, variant: Variant, dataset: Dataset, splits) -> dict:
    nav = navigation_metrics(model, variant, dataset, splits)
    return {"SR": float(np.mean([nav[s]["SR"] for s in nav])),
            "SPL": float(np.mean([nav[s]["SPL"] for s in nav])),
            "split_SR": {s: nav[s]["SR"] for s in nav}}


def run_ablations(base: TrainConfig, dataset: Dataset, seeds, splits=EVAL_SPLITS,
                  pretrained: PolicyModel | None = None, variants=None, progress=None) -> AblationTable:
    """Train and evaluate every variant for every seed.

    The backbone is pretrained once (with ``base.seed``) and shared by all
    seeds and variants; seeds vary the adaptation phase.  ``no_finetune``
    evaluates that backbone with zero-initialized adapters and no memory.
    SR per row is the mean over ``splits`` of the eval-seed-averaged SR.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("ablations need at least two seeds")
    names = list(variants or ABLATIONS) + [NO_FINETUNE]
    cache = EpisodeCache(dataset.layouts)
    if pretrained is None:
        pretrained = pretrain(base, dataset, cache=cache).model
    table = AblationTable(seeds, names)
    for seed in seeds:
        for name in names:
            if name == NO_FINETUNE:
                model = clone_model(pretrained)
                if not model.has_lora():
                    model.attach_lora(seed=seed)
                variant = Variant(memory=False)
            else:
                cfg = base.replace(seed=seed, **ABLATIONS[name])
                model = finetune(cfg, dataset, clone_model(pretrained), cache=cache).model
                variant = Variant.from_train_config(cfg)
            row = {"seed": seed, "variant": name, **_score(model, variant, dataset, splits)}
            table.rows.append(row)
            if progress is not None:
                progress(row)
    return table
