"""Model and training configuration, and the flat ``key = value`` file format."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

LORA_PRESETS = {
    # rank/alpha/dropout from the adapter description; the hyperparameter table lists rank 16
    "r8": {"lora_rank": 8, "lora_alpha": 32.0, "lora_dropout": 0.1},
    "r16": {"lora_rank": 16, "lora_alpha": 32.0, "lora_dropout": 0.1},
}


@dataclass
class ModelConfig:
    d_model: int = 128
    n_world: int = 64
    backbone_layers: int = 4
    backbone_heads: int = 4
    ff_mult: int = 4
    traj_layers: int = 2
    traj_heads: int = 4
    window: int = 16
    patch_grid: int = 4
    pcd_cap: int = 256
    max_instruction_len: int = 64
    max_traj_len: int = 160
    max_generate: int = 4
    lora_rank: int = 8
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    lora_scale_by_rank: bool = True
    pooling: str = "mean"            # token pooling for contrastive losses: mean | first
    pcd_pooling: str = "mean"        # episodic query pooling over points: mean | max
    exclude_positive: bool = False   # drop the positive pair from the spatial-loss denominator
    projection_heads: bool = True
    init_seed: int = 0

    @property
    def n_patches(self) -> int:
        return self.patch_grid * self.patch_grid


@dataclass
class TrainConfig:
    # optimizer and schedule
    peak_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    warmup_steps: int = 500
    total_steps: int = 3000
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-4
    pretrain_warmup: int = 100
    batch_episodes: int = 8
    steps_per_episode: int = 2
    qa_fraction: float = 0.0
    # off-path states relabelled by the expert
    perturb_prob: float = 0.0
    perturb_max: int = 3
    # objective
    lambda_s: float = 0.1
    lambda_e: float = 0.1
    tau: float = 0.07
    seed: int = 0
    lora_preset: str = "r8"
    episodic_in_sequence: bool = False
    # ablation switches
    no_spatial: bool = False
    no_episodic: bool = False
    no_grounding: bool = False
    no_trajectory: bool = False
    no_geometry: bool = False
    # evaluation
    eval_seeds: int = 3
    log_every: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.lambda_s < 0 or self.lambda_e < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.lora_preset not in LORA_PRESETS:
            raise ValueError(f"unknown LoRA preset {self.lora_preset!r}")
        if not 0.0 <= self.perturb_prob <= 1.0 or self.perturb_max < 1:
            raise ValueError("perturb_prob must lie in [0, 1] and perturb_max be at least 1")
        if self.batch_episodes < 2:
            raise ValueError("contrastive losses need at least two episodes per batch")

    def replace(self, **changes) -> "TrainConfig":
        model_changes = {k: v for k, v in changes.items() if k in _MODEL_FIELDS}
        top = {k: v for k, v in changes.items() if k not in _MODEL_FIELDS}
        model = dataclasses.replace(self.model, **model_changes) if model_changes else self.model
        return dataclasses.replace(self, model=model, **top)

    def to_flat(self) -> dict:
        flat = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        flat.update({f"model.{k}": v for k, v in dataclasses.asdict(self.model).items()})
        return flat

    def config_hash(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
# workload keys share the config file but are read by the data generator
DATA_SECTIONS = ("workload", "layout", "episode")


def _coerce(kind, raw: str):
    if kind in (bool, "bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def _field_types(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


def parse_flat(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment.  Model keys use a ``model.`` prefix."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    parser.read_string("[config]\n" + text)
    return dict(parser["config"])


def load_train_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    raw = parse_flat(Path(path).read_text()) if path else {}
    top_types = _field_types(TrainConfig)
    model_types = _field_types(ModelConfig)
    top, model = {}, {}
    for key, value in raw.items():
        if key.split(".", 1)[0] in DATA_SECTIONS:
            continue
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in model_types:
                raise KeyError(f"unknown model config key {key!r}")
            model[name] = _coerce(model_types[name], value)
        else:
            if key not in top_types or key == "model":
                raise KeyError(f"unknown config key {key!r}")
            top[key] = _coerce(top_types[key], value)
    cfg = TrainConfig(model=ModelConfig(**model), **top)
    if overrides:
        cfg = cfg.replace(**overrides)
    cfg.validate()
    return cfg


def dump_flat(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_flat().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
