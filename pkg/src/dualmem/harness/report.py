"""Evaluation of a trained model and the EvalReport container."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..policy import PolicyModel, Variant
from ..worldgen.dataset import Dataset
from .data import EpisodeCache
from .evaluate import ModelAgent, answer_questions, compute_qa_metrics, compute_spl, rollout_many

EVAL_SPLITS = ("val_seen", "val_unseen")


@dataclass
class EvalReport:
    config_hash: str
    seed: int
    navigation: dict = field(default_factory=dict)
    qa: dict = field(default_factory=dict)
    distance: dict | None = None
    ablation: dict | None = None
    # wall-clock time; kept out of the serialized report so reruns compare byte-for-byte
    runtime_seconds: float | None = None

    def validate(self) -> None:
        for split, nav in self.navigation.items():
            for key in ("SR", "SPL"):
                if not 0.0 <= nav[key] <= 1.0:
                    raise ValueError(f"{split} {key} = {nav[key]} outside [0, 1]")
        for split, qa in self.qa.items():
            for cat, v in qa["per_category"].items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{split} {cat} score {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "navigation": self.navigation,
                "qa": self.qa, "distance": self.distance, "ablation": self.ablation}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        lines = [f"config_hash: {self.config_hash}", f"seed: {self.seed}", ""]
        if self.navigation:
            lines.append("[navigation]")
            lines.append(f"{'split':<12}{'SR':>8}{'SPL':>8}{'episodes':>10}")
            for split, nav in self.navigation.items():
                lines.append(f"{split:<12}{nav['SR']:>8.4f}{nav['SPL']:>8.4f}{nav['n_episodes']:>10d}")
                for row in nav["per_seed"]:
                    lines.append(f"  eval_seed {row['eval_seed']}: SR {row['SR']:.4f} SPL {row['SPL']:.4f}")
            lines.append("")
        if self.qa:
            lines.append("[qa]")
            for split, qa in self.qa.items():
                cats = " ".join(f"{c}={v:.4f}" for c, v in qa["per_category"].items())
                lines.append(f"{split}: Avg {qa['Avg']:.4f} unparseable {qa['unparseable']} | {cats}")
            lines.append("")
        if self.distance:
            d = self.distance
            lines.append("[episodic distances]")
            lines.append(f"intra {d['intra']:.6f} inter {d['inter']:.6f} ratio {d['ratio']:.6f}"
                         + ("" if d.get("ratio_defined", True) else " (undefined)"))
            for lid, s in sorted(d.get("per_layout", {}).items()):
                lines.append(f"  {lid}: intra {s['intra']:.6f} inter {s['inter']:.6f} ratio {s['ratio']:.6f}")
            lines.append("")
        if self.ablation:
            a = self.ablation
            lines.append("[ablation]")
            lines.append(f"{'variant':<16}{'mean SR':>9}{'delta':>9}{'W+':>7}{'p':>9}")
            for v in a["variants"]:
                w = a["wilcoxon"].get(v)
                wtxt = f"{w['W']:>7.1f}{w['p']:>9.4f}" if w else f"{'-':>7}{'-':>9}"
                lines.append(f"{v:<16}{a['mean_SR'][v]:>9.4f}{a['delta_SR'][v]:>9.4f}{wtxt}")
            lines.append("per seed:")
            for row in a["rows"]:
                lines.append(f"  seed {row['seed']} {row['variant']:<14} SR {row['SR']:.4f} SPL {row['SPL']:.4f}")
            lines.append("")
        return "\n".join(lines)

    def save(self, out_dir: str | Path, stem: str = "eval_report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        txt, js = out / f"{stem}.txt", out / f"{stem}.json"
        txt.write_text(self.to_text())
        js.write_text(self.to_json())
        return txt, js


def navigation_metrics(model: PolicyModel, variant: Variant, dataset: Dataset, splits=EVAL_SPLITS) -> dict:
    """SR/SPL per split, averaged over evaluation seeds."""
    agent = ModelAgent(model, variant)
    out = {}
    for split in splits:
        eps = dataset.split(split)
        if not eps:
            continue
        seeds = sorted({e.eval_seed for e in eps if e.eval_seed is not None}) or [None]
        per_seed = []
        for s in seeds:
            group = [e for e in eps if e.eval_seed == s]
            sr, spl = compute_spl(rollout_many(agent, group, dataset.layouts))
            per_seed.append({"eval_seed": s, "SR": sr, "SPL": spl, "n": len(group)})
        out[split] = {"SR": float(np.mean([r["SR"] for r in per_seed])),
                      "SPL": float(np.mean([r["SPL"] for r in per_seed])),
                      "n_episodes": len(eps), "per_seed": per_seed}
    return out


def qa_metrics(model: PolicyModel, variant: Variant, dataset: Dataset, cache: EpisodeCache,
               splits=EVAL_SPLITS) -> dict:
    out = {}
    for split in splits:
        eps = [e for e in dataset.split(split) if e.qa]
        if not eps:
            continue
        m = compute_qa_metrics(answer_questions(model, variant, eps, cache))
        out[split] = {"per_category": m.per_category, "Avg": m.avg, "counts": m.counts,
                      "unparseable": m.unparseable}
    return out


def evaluate(model: PolicyModel, variant: Variant, dataset: Dataset, config_hash: str, seed: int,
             cache: EpisodeCache | None = None, with_qa: bool = True, splits=EVAL_SPLITS) -> EvalReport:
    cache = cache or EpisodeCache(dataset.layouts)
    report = EvalReport(config_hash, seed, navigation_metrics(model, variant, dataset, splits))
    if with_qa:
        report.qa = qa_metrics(model, variant, dataset, cache, splits)
    report.validate()
    return report
