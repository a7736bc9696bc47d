"""Two-phase training: backbone pretraining, then LoRA adaptation with the memory losses."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numerics as T
from ..config import LORA_PRESETS, TrainConfig
from ..episodic import episodic_infonce
from ..errors import TrainingAborted
from ..policy import PolicyModel, Variant, save_checkpoint, total_loss
from ..spatial import pool_tokens, spatial_loss
from ..worldgen.dataset import Dataset
from .data import EpisodeCache, collate

LOG_FIELDS = ("step", "phase", "lr", "L_CE", "L_spatial", "L_episodic", "L_total")


@dataclass
class TrainResult:
    model: PolicyModel
    log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def model_config_for(cfg: TrainConfig):
    """The model config with the selected LoRA preset applied."""
    return dataclasses.replace(cfg.model, **LORA_PRESETS[cfg.lora_preset])


def checkpoint_header(cfg: TrainConfig, phase: str) -> dict:
    return {"config": cfg.to_flat(), "config_hash": cfg.config_hash(), "seed": cfg.seed, "phase": phase}


class BatchSampler:
    """Episodes without replacement within a batch, a few distinct steps from each."""

    def __init__(self, episodes, cache: EpisodeCache, cfg: TrainConfig, rng: np.random.Generator,
                 allow_qa: bool = True):
        self.episodes = episodes
        self.cache = cache
        self.cfg = cfg
        self.rng = rng
        self.allow_qa = allow_qa

    def draw(self):
        cfg, rng = self.cfg, self.rng
        n = min(cfg.batch_episodes, len(self.episodes))
        picks = rng.choice(len(self.episodes), size=n, replace=False)
        samples = []
        for i in picks:
            ep = self.episodes[int(i)]
            k = min(cfg.steps_per_episode, len(ep.actions))
            for t in rng.choice(len(ep.actions), size=k, replace=False):
                if self.allow_qa and ep.qa and rng.random() < cfg.qa_fraction:
                    samples.append(self.cache.qa_step(ep, int(rng.integers(len(ep.qa)))))
                elif cfg.perturb_prob > 0 and rng.random() < cfg.perturb_prob:
                    samples.append(self.cache.perturbed_step(ep, int(t), rng, cfg.perturb_max))
                else:
                    samples.append(self.cache.nav_step(ep, int(t)))
        return collate(samples, cfg.model.max_traj_len)


def _write_log(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record) + "\n")


def _optimizer(model: PolicyModel, peak: float, warmup: int, total: int, cfg: TrainConfig) -> T.AdamW:
    state = T.OptimizerState(peak_lr=peak, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
                             warmup_steps=min(warmup, total), total_steps=total)
    return T.AdamW(model.named_parameters(), state)


def _run_phase(model: PolicyModel, cfg: TrainConfig, phase: str, sampler: BatchSampler, opt: T.AdamW,
               steps: int, variant: Variant, rng: np.random.Generator, log: list, fh,
               out_dir: Path | None) -> None:
    lam_s = 0.0 if (phase == "pretrain" or cfg.no_spatial) else cfg.lambda_s
    lam_e = 0.0 if (phase == "pretrain" or cfg.no_episodic) else cfg.lambda_e
    model.train()
    for step in range(1, steps + 1):
        batch = sampler.draw()
        try:
            with T.Tape() as tape:
                out = model.forward(batch, variant)
                ce = model.ce_loss(out.logits, batch)
                ls = le = None
                if lam_s:
                    ls = spatial_loss(out.F_vis_prime, out.F_vis, cfg.tau, pooling=cfg.model.pooling,
                                      heads=model.heads if cfg.model.projection_heads else None,
                                      exclude_positive=cfg.model.exclude_positive)
                if lam_e:
                    pooled = pool_tokens(out.F_vis_prime, cfg.model.pooling)
                    le = episodic_infonce(out.F_episodic, batch.episode_ids, pooled, batch.episode_ids,
                                          cfg.tau, rng)
                loss = total_loss(ce, ls, le, lam_s, lam_e)
                if not np.isfinite(loss.data).all():
                    raise FloatingPointError("non-finite loss")
                tape.backward(loss)
            lr = opt.step()
        except FloatingPointError as exc:
            # the failing step never reached the parameters, so they are the last good state
            path = None
            if out_dir is not None:
                path = out_dir / "last_good.ckpt"
                save_checkpoint(path, model, checkpoint_header(cfg, phase))
            raise TrainingAborted(f"{phase} step {step}: {exc}; last good checkpoint: {path}") from exc
        finally:
            opt.zero_grad()
        rec = {"step": step, "phase": phase, "lr": lr, "L_CE": ce.item(),
               "L_spatial": ls.item() if ls is not None else 0.0,
               "L_episodic": le.item() if le is not None else 0.0, "L_total": loss.item()}
        log.append(rec)
        if step % cfg.log_every == 0 or step == steps:
            _write_log(fh, rec)
    model.eval()


def pretrain(cfg: TrainConfig, dataset: Dataset, out_dir: Path | None = None,
             cache: EpisodeCache | None = None, log_file=None) -> TrainResult:
    """Full-backbone training on the memory-free sequence with L_CE only."""
    cfg.validate()
    model = PolicyModel(model_config_for(cfg))
    model.seed_dropout(cfg.seed)
    model.set_phase("pretrain")
    cache = cache or EpisodeCache(dataset.layouts)
    rng = np.random.default_rng([cfg.seed, 1])
    sampler = BatchSampler(dataset.split("train"), cache, cfg, rng)
    opt = _optimizer(model, cfg.pretrain_lr, cfg.pretrain_warmup, cfg.pretrain_steps, cfg)
    log: list = []
    _run_phase(model, cfg, "pretrain", sampler, opt, cfg.pretrain_steps, Variant(memory=False), rng, log,
               log_file, out_dir)
    return TrainResult(model, log)


def finetune(cfg: TrainConfig, dataset: Dataset, model: PolicyModel, out_dir: Path | None = None,
             cache: EpisodeCache | None = None, log_file=None) -> TrainResult:
    """LoRA phase: backbone frozen, adapters + encoders + memories trained on the composite loss."""
    cfg.validate()
    if not model.has_lora():
        model.attach_lora(seed=cfg.seed)
    model.seed_dropout(cfg.seed)
    model.set_phase("lora")
    cache = cache or EpisodeCache(dataset.layouts)
    rng = np.random.default_rng([cfg.seed, 2])
    sampler = BatchSampler(dataset.split("train"), cache, cfg, rng)
    opt = _optimizer(model, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps, cfg)
    log: list = []
    _run_phase(model, cfg, "lora", sampler, opt, cfg.total_steps, Variant.from_train_config(cfg), rng, log,
               log_file, out_dir)
    return TrainResult(model, log)


def clone_model(model: PolicyModel) -> PolicyModel:
    twin = PolicyModel(model.cfg)
    if model.has_lora():
        twin.attach_lora()
    src = dict(model.named_parameters())
    for name, p in twin.named_parameters():
        p.data = src[name].data.copy()
        p.requires_grad = src[name].requires_grad
    return twin


def train(cfg: TrainConfig, dataset: Dataset, out_dir: str | Path | None = None,
          pretrained: PolicyModel | None = None, cache: EpisodeCache | None = None) -> TrainResult:
    """Pretrain (unless a pretrained model is given), then LoRA-adapt.

    With ``out_dir`` the per-step log goes to ``train_log.jsonl`` and the
    final weights to ``model.ckpt``.
    """
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = (out / "train_log.jsonl").open("w")
    cache = cache or EpisodeCache(dataset.layouts)
    try:
        log: list = []
        if pretrained is None:
            pre = pretrain(cfg, dataset, out, cache, fh)
            model, log = pre.model, pre.log
        else:
            model = clone_model(pretrained)
        res = finetune(cfg, dataset, model, out, cache, fh)
        log += res.log
    finally:
        if fh is not None:
            fh.close()
    path = None
    if out is not None:
        path = out / "model.ckpt"
        save_checkpoint(path, res.model, checkpoint_header(cfg, "lora"))
    return TrainResult(res.model, log, path)
