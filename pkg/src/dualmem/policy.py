"""Decision module: sequence assembly, the prefix decoder with LoRA adapters, and the objective.

The model consumes a :class:`Batch` of padded arrays.  Two sequence layouts
exist: the memory-free layout [H_T; F_vis; F_traj] used to pretrain the
backbone, and the full layout [H_T; F'_vis; F_traj; E_world] with an optional
trailing F_episodic row.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as T
from . import vocab
from .config import ModelConfig
from .encoders import (
    BEGIN,
    GeometricEncoder,
    InstructionEncoder,
    PointCloudEncoder,
    TrajectoryEncoder,
    VisualEncoder,
)
from .episodic import EpisodicMemory
from .errors import AssemblyError, ConfigurationError, DimensionError
from .numerics.nn import LayerNorm, Linear, MLP, Module, attention, param
from .numerics.tensor import MASK_VALUE, Tensor
from .spatial import Grounding, ProjectionHeads, WorldEmbedding
from .worldgen.render import N_CHANNELS

# block-type tags of the unified sequence
INSTR, VIS, TRAJ, WORLD, EPISODIC = range(5)
BLOCK_NAMES = ("instruction", "visual", "trajectory", "world", "episodic")

N_ACTIONS = len(vocab.ACTION_TOKENS)
N_OUT = len(vocab.OUTPUT_TOKENS)


# --------------------------------------------------------------------------
# LoRA


class _DropoutContext:
    """Shared dropout RNG; a plain object so parameter traversal skips it."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)


class LoRAAdapter(Module):
    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, dropout: float,
                 rng: np.random.Generator, scale_by_rank: bool = True):
        if rank < 1:
            raise ConfigurationError("LoRA rank must be positive")
        self.rank = rank
        self.alpha = alpha
        self.dropout = dropout
        self.scale = alpha / rank if scale_by_rank else 1.0
        self.A = param(rng.normal(0.0, d_in ** -0.5, size=(d_in, rank)))
        self.B = param(np.zeros((rank, d_out)))

    def n_params(self) -> int:
        return self.A.size + self.B.size


def lora_forward(x: Tensor, W_frozen: Tensor, adapter: LoRAAdapter | None, *,
                 training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """x W + scale * (drop(x) A) B; dropout only in training mode."""
    y = T.matmul(x, W_frozen)
    if adapter is None:
        return y
    xd = T.dropout(x, adapter.dropout, rng, training)
    return y + T.matmul(T.matmul(xd, adapter.A), adapter.B) * adapter.scale


class AdaptedLinear(Module):
    """A Linear whose weight can carry a LoRA adapter."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, ctx: _DropoutContext, bias: bool = True):
        self.base = Linear(d_in, d_out, rng, bias)
        self.adapter: LoRAAdapter | None = None
        self._ctx = ctx

    def __call__(self, x: Tensor) -> Tensor:
        y = lora_forward(x, self.base.weight, self.adapter, training=self.training, rng=self._ctx.rng)
        return y if self.base.bias is None else y + self.base.bias

    def effective_weight(self) -> np.ndarray:
        w = self.base.weight.data
        if self.adapter is None:
            return w.copy()
        return w + self.adapter.scale * (self.adapter.A.data @ self.adapter.B.data)


# --------------------------------------------------------------------------
# backbone


class DecoderBlock(Module):
    def __init__(self, d: int, heads: int, d_ff: int, rng, ctx):
        self.heads = heads
        self.ln1 = LayerNorm(d)
        self.q = AdaptedLinear(d, d, rng, ctx)
        self.k = Linear(d, d, rng)
        self.v = AdaptedLinear(d, d, rng, ctx)
        self.proj = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.ff = MLP(d, d_ff, d, rng)

    def __call__(self, x: Tensor, bias: np.ndarray) -> Tensor:
        h = self.ln1(x)
        x = x + self.proj(attention(self.q(h), self.k(h), self.v(h), self.heads, bias))
        return x + self.ff(self.ln2(x))


def prefix_lm_bias(prefix_valid: np.ndarray, gen_valid: np.ndarray) -> np.ndarray:
    """(B, 1, n+G, n+G) additive mask: prefix is bidirectional, generated rows causal."""
    b, n = prefix_valid.shape
    g = gen_valid.shape[1]
    total = n + g
    q = np.arange(total)[:, None]
    k = np.arange(total)[None, :]
    structural = (k < n) | ((q >= n) & (k <= q))
    keys = np.concatenate([prefix_valid, gen_valid], axis=1).astype(bool)
    allowed = structural[None] & keys[:, None, :]
    return np.where(allowed, 0.0, MASK_VALUE)[:, None]


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng, ctx):
        d = cfg.d_model
        if d % cfg.backbone_heads:
            raise ConfigurationError("d_model must be divisible by the head count")
        self.out_embed = param(rng.normal(0.0, d ** -0.5, size=(N_OUT + 1, d)))
        self.gen_pos = param(rng.normal(0.0, d ** -0.5, size=(cfg.max_generate + 1, d)))
        self.blocks = [DecoderBlock(d, cfg.backbone_heads, cfg.ff_mult * d, rng, ctx)
                       for _ in range(cfg.backbone_layers)]
        self.ln_f = LayerNorm(d)
        self.head = AdaptedLinear(d, N_OUT, rng, ctx)

    def __call__(self, prefix: Tensor, prefix_valid: np.ndarray, gen_ids: np.ndarray,
                 gen_valid: np.ndarray | None = None) -> Tensor:
        """Next-token logits (B, G, V) at every generated position."""
        gen_ids = np.asarray(gen_ids, dtype=np.int64)
        b, g = gen_ids.shape
        if g > self.gen_pos.shape[0]:
            raise DimensionError(f"generated length {g} exceeds {self.gen_pos.shape[0]}")
        if gen_valid is None:
            gen_valid = np.ones((b, g), dtype=bool)
        n = prefix.shape[1]
        x = T.concat([prefix, T.embedding(self.out_embed, gen_ids) + self.gen_pos[:g]], axis=1)
        bias = prefix_lm_bias(prefix_valid, gen_valid)
        for block in self.blocks:
            x = block(x, bias)
        return self.head(self.ln_f(x[:, n:, :]))

    def adapted_sites(self) -> list[AdaptedLinear]:
        sites = []
        for block in self.blocks:
            sites += [block.q, block.v]
        return sites + [self.head]


# --------------------------------------------------------------------------
# inputs and assembly


@dataclass
class Batch:
    """Padded model inputs for B samples.  Masks are True on real entries."""

    instr_ids: np.ndarray
    instr_mask: np.ndarray
    semantic: np.ndarray
    depth: np.ndarray
    points: np.ndarray
    points_mask: np.ndarray
    traj_ids: np.ndarray
    traj_mask: np.ndarray
    gen_ids: np.ndarray
    gen_mask: np.ndarray
    targets: np.ndarray | None = None
    episode_ids: list = field(default_factory=list)
    is_nav: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.instr_ids.shape[0]


@dataclass
class Variant:
    """Which memory pathways feed the sequence."""

    memory: bool = True                 # False: pretraining layout [H_T; F_vis; F_traj]
    episodic_in_sequence: bool = False
    no_spatial: bool = False
    no_episodic: bool = False
    no_grounding: bool = False
    no_trajectory: bool = False
    no_geometry: bool = False

    @classmethod
    def from_train_config(cls, cfg, memory: bool = True) -> "Variant":
        return cls(memory=memory, episodic_in_sequence=cfg.episodic_in_sequence,
                   no_spatial=cfg.no_spatial, no_episodic=cfg.no_episodic,
                   no_grounding=cfg.no_grounding, no_trajectory=cfg.no_trajectory,
                   no_geometry=cfg.no_geometry)


@dataclass
class UnifiedSequence:
    rows: Tensor          # (B, n, D) or (n, D)
    tags: np.ndarray      # (n,) block tag per position
    valid: np.ndarray     # (B, n) or (n,)

    @property
    def length(self) -> int:
        return int(self.tags.shape[0])

    def block_slice(self, tag: int) -> slice:
        idx = np.flatnonzero(self.tags == tag)
        return slice(int(idx[0]), int(idx[-1]) + 1) if len(idx) else slice(0, 0)


class Assembler(Module):
    """Block-type embeddings, plus position embeddings for the visual patches."""

    def __init__(self, d: int, n_vis: int, rng):
        self.types = param(rng.normal(0.0, 0.02, size=(len(BLOCK_NAMES), d)))
        self.vis_pos = param(rng.normal(0.0, 0.02, size=(n_vis, d)))

    def __call__(self, blocks: list[tuple[int, Tensor, np.ndarray]]) -> UnifiedSequence:
        """``blocks``: (tag, rows (B, n_i, D), valid (B, n_i)) in sequence order."""
        if not blocks:
            raise AssemblyError("empty sequence")
        d = self.types.shape[1]
        parts, tags, valid = [], [], []
        for tag, rows, mask in blocks:
            if rows.shape[-1] != d or rows.ndim != 3:
                raise AssemblyError(f"{BLOCK_NAMES[tag]} block has shape {rows.shape}, expected (B, n, {d})")
            x = rows + self.types[tag]
            if tag == VIS:
                if rows.shape[1] != self.vis_pos.shape[0]:
                    raise AssemblyError(f"visual block has {rows.shape[1]} rows, expected {self.vis_pos.shape[0]}")
                x = x + self.vis_pos
            parts.append(x)
            tags.append(np.full(rows.shape[1], tag))
            valid.append(mask)
        b = {p.shape[0] for p in parts}
        if len(b) != 1:
            raise AssemblyError(f"blocks disagree on batch size: {sorted(b)}")
        return UnifiedSequence(T.concat(parts, axis=1), np.concatenate(tags), np.concatenate(valid, axis=1))


def _as_batched(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


def assemble_input(H_T: Tensor, grounded, F_traj: Tensor, world: WorldEmbedding | None,
                   trace=None, assembler: Assembler | None = None) -> UnifiedSequence:
    """Single-sample assembly of [H_T; F'_vis; F_traj; E_world] (+ F_episodic row)."""
    F_vis = grounded.F_vis_prime if hasattr(grounded, "F_vis_prime") else grounded
    d = H_T.shape[-1]
    for name, x in (("F'_vis", F_vis), ("F_traj", F_traj)):
        if x.shape[-1] != d:
            raise AssemblyError(f"{name} width {x.shape[-1]} != {d}")
    blocks = [(INSTR, _as_batched(H_T)), (VIS, _as_batched(F_vis)), (TRAJ, _as_batched(F_traj))]
    if world is not None:
        if world.E_world.shape[-1] != d:
            raise AssemblyError(f"E_world width {world.E_world.shape[-1]} != {d}")
        blocks.append((WORLD, _as_batched(world.E_world)))
    if trace is not None:
        f = trace.F_episodic if hasattr(trace, "F_episodic") else trace
        if f.shape[-1] != d:
            raise AssemblyError(f"F_episodic width {f.shape[-1]} != {d}")
        blocks.append((EPISODIC, T.reshape(f, (1, 1, d))))
    full = [(tag, rows, np.ones(rows.shape[:2], dtype=bool)) for tag, rows in blocks]
    if assembler is None:
        seq_rows = T.concat([r for _, r, _ in full], axis=1)
        seq = UnifiedSequence(seq_rows, np.concatenate([np.full(r.shape[1], t) for t, r, _ in full]),
                              np.ones((1, seq_rows.shape[1]), dtype=bool))
    else:
        seq = assembler(full)
    return UnifiedSequence(seq.rows[0], seq.tags, seq.valid[0])


def decode_step(model: "PolicyModel", seq: UnifiedSequence, generated) -> Tensor:
    """Logits over the output vocabulary for the next token after ``generated``."""
    gen = [vocab.BOS] + list(generated)
    if len(gen) > model.backbone.gen_pos.shape[0]:
        raise DimensionError("generation exceeded the maximum length")
    rows = _as_batched(seq.rows)
    valid = np.atleast_2d(seq.valid)
    logits = model.backbone(rows, valid, np.array([gen]))
    return logits[0, -1]


def total_loss(ce, spatial, episodic, lambda_s: float, lambda_e: float):
    """L_CE + lambda_s * L_spatial + lambda_e * L_episodic; zero-weight terms are skipped."""
    if lambda_s < 0 or lambda_e < 0:
        raise ValueError("loss weights must be non-negative")
    out = ce
    if lambda_s:
        out = out + spatial * lambda_s
    if lambda_e:
        out = out + episodic * lambda_e
    return out


# --------------------------------------------------------------------------
# the model


@dataclass
class ForwardOutput:
    logits: Tensor                   # (B, G, V)
    F_vis: Tensor | None = None
    F_vis_prime: Tensor | None = None
    F_episodic: Tensor | None = None
    Q_epi: Tensor | None = None
    sequence: UnifiedSequence | None = None


class PolicyModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        d = cfg.d_model
        rng = np.random.default_rng(cfg.init_seed)
        self._ctx = _DropoutContext(cfg.init_seed)
        self.instr_enc = InstructionEncoder(len(vocab.INPUT_TOKENS), cfg.max_instruction_len, d, rng)
        self.vis_enc = VisualEncoder(cfg.window, cfg.patch_grid, N_CHANNELS, d, rng)
        self.geo_enc = GeometricEncoder(cfg.window, cfg.patch_grid, d, rng)
        self.pcd_enc = PointCloudEncoder(d, rng)
        self.traj_enc = TrajectoryEncoder(d, cfg.traj_layers, cfg.traj_heads, cfg.max_traj_len, rng)
        self.grounding = Grounding(d, rng)
        self.world = WorldEmbedding(cfg.n_world, d, rng)
        self.episodic = EpisodicMemory(d, rng)
        self.heads = ProjectionHeads(d, rng)
        self.assembler = Assembler(d, cfg.n_patches, rng)
        self.backbone = Backbone(cfg, rng, self._ctx)
        self.lora_rng = np.random.default_rng([cfg.init_seed, 7])

    # parameter groups ----------------------------------------------------

    def backbone_names(self) -> set[str]:
        return {f"backbone.{n}" for n, _ in self.backbone.named_parameters() if ".adapter." not in n}

    def has_lora(self) -> bool:
        return self.backbone.head.adapter is not None

    def attach_lora(self, rank: int | None = None, alpha: float | None = None,
                    dropout: float | None = None, seed: int | None = None) -> None:
        cfg = self.cfg
        rank = cfg.lora_rank if rank is None else rank
        alpha = cfg.lora_alpha if alpha is None else alpha
        dropout = cfg.lora_dropout if dropout is None else dropout
        rng = self.lora_rng if seed is None else np.random.default_rng([seed, 7])
        # the config records the adapter shape so checkpoints rebuild it
        self.cfg = replace(cfg, lora_rank=rank, lora_alpha=alpha, lora_dropout=dropout)
        for site in self.backbone.adapted_sites():
            d_in, d_out = site.base.weight.shape
            site.adapter = LoRAAdapter(d_in, d_out, rank, alpha, dropout, rng, cfg.lora_scale_by_rank)

    def set_phase(self, phase: str) -> None:
        """'pretrain': everything trainable; 'lora': backbone frozen except adapters."""
        self.set_trainable(True)
        if phase == "lora":
            frozen = self.backbone_names()
            for name, p in self.named_parameters():
                if name in frozen:
                    p.requires_grad = False
        elif phase != "pretrain":
            raise ValueError(f"unknown phase {phase!r}")

    def seed_dropout(self, seed: int) -> None:
        self._ctx.rng = np.random.default_rng([seed, 13])

    # forward ---------------------------------------------------------------

    def encode_prefix(self, batch: Batch, variant: Variant) -> ForwardOutput:
        H = self.instr_enc(batch.instr_ids)
        F_vis = self.vis_enc(batch.semantic)
        traj_ids, traj_mask = batch.traj_ids, batch.traj_mask
        if variant.no_trajectory:
            traj_ids = np.full((batch.size, 1), BEGIN)
            traj_mask = np.ones((batch.size, 1), dtype=bool)
        F_traj = self.traj_enc(traj_ids, traj_mask)
        b = batch.size
        if not variant.memory:
            seq = self.assembler([(INSTR, H, batch.instr_mask), (VIS, F_vis, np.ones(F_vis.shape[:2], bool)),
                                  (TRAJ, F_traj, traj_mask)])
            return ForwardOutput(None, F_vis=F_vis, sequence=seq)

        if variant.no_grounding:
            F_prime = F_vis
        else:
            if variant.no_geometry:
                F_geo = Tensor(np.zeros(F_vis.shape))
            else:
                F_geo = self.geo_enc(batch.depth)
            F_prime = self.grounding(F_vis, F_geo)

        F_epi = Q = None
        if not variant.no_episodic:
            F_pcd = self.pcd_enc(batch.points, batch.points_mask)
            Q = self.episodic.form_query(F_pcd, batch.points_mask, F_traj, traj_mask, self.cfg.pcd_pooling)
            F_epi = self.episodic.form_trace(Q, self.world)

        blocks = [(INSTR, H, batch.instr_mask), (VIS, F_prime, np.ones(F_prime.shape[:2], bool)),
                  (TRAJ, F_traj, traj_mask)]
        if not variant.no_spatial:
            n_w = self.world.n_world
            E = self.world.E_world + Tensor(np.zeros((b, n_w, self.cfg.d_model)))
            blocks.append((WORLD, E, np.ones((b, n_w), bool)))
        if variant.episodic_in_sequence and F_epi is not None:
            blocks.append((EPISODIC, T.reshape(F_epi, (b, 1, self.cfg.d_model)), np.ones((b, 1), bool)))
        seq = self.assembler(blocks)
        return ForwardOutput(None, F_vis=F_vis, F_vis_prime=F_prime, F_episodic=F_epi, Q_epi=Q, sequence=seq)

    def forward(self, batch: Batch, variant: Variant) -> ForwardOutput:
        out = self.encode_prefix(batch, variant)
        out.logits = self.backbone(out.sequence.rows, out.sequence.valid, batch.gen_ids, batch.gen_mask)
        return out

    def ce_loss(self, logits: Tensor, batch: Batch) -> Tensor:
        b, g, v = logits.shape
        return T.cross_entropy(T.reshape(logits, (b * g, v)), batch.targets.reshape(-1),
                               batch.gen_mask.reshape(-1).astype(np.float64))

    def act(self, batch: Batch, variant: Variant) -> np.ndarray:
        """Greedy action ids (argmax restricted to the action tokens)."""
        logits = self.forward(batch, variant).logits.data[:, -1, :N_ACTIONS]
        return logits.argmax(axis=1)

    def generate(self, batch: Batch, variant: Variant, max_len: int | None = None) -> list[list[int]]:
        """Greedy decoding until EOS or ``max_len`` tokens; the prefix is encoded once."""
        max_len = max_len or self.cfg.max_generate
        out = self.encode_prefix(batch, variant)
        b = batch.size
        seqs = [[] for _ in range(b)]
        done = np.zeros(b, dtype=bool)
        for step in range(max_len):
            gen = np.array([[vocab.BOS] + s + [vocab.EOS] * (step - len(s)) for s in seqs])
            logits = self.backbone(out.sequence.rows, out.sequence.valid, gen)
            nxt = logits.data[:, -1, N_ACTIONS:].argmax(axis=1) + N_ACTIONS
            for i in range(b):
                if not done[i]:
                    seqs[i].append(int(nxt[i]))
                    done[i] = nxt[i] == vocab.EOS
            if done.all():
                break
        return seqs


# --------------------------------------------------------------------------
# checkpoints
#
# Byte layout (all integers little-endian):
#   magic   8 bytes  b"DMEMCKPT"
#   u32     format version
#   u32     header length H, then H bytes of UTF-8 JSON (sorted keys)
#   u32     blob count N, then N blobs, each:
#           u16 name length, name bytes (UTF-8), u8 ndim, ndim x u32 extents,
#           prod(extents) x f64 values in row-major order

MAGIC = b"DMEMCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, model: PolicyModel, header: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = dict(header)
    head["model_config"] = asdict(model.cfg)
    head["lora"] = model.has_lora()
    blob = json.dumps(head, sort_keys=True).encode()
    params = list(model.named_parameters())
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, p in params:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.ndim)
                     + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    header = json.loads(raw[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return header, arrays


def load_checkpoint(path) -> tuple[PolicyModel, dict]:
    header, arrays = read_checkpoint(path)
    model = PolicyModel(ModelConfig(**header["model_config"]))
    if header.get("lora"):
        model.attach_lora()
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))[:5]
        raise ValueError(f"checkpoint parameters do not match the model: {missing}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data = arrays[name].copy()
    return model, header
