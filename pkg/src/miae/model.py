"""Masked invariant autoencoder: geometric encoder over visible residue
frames, light transformer decoder over the full sequence."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from miae.errors import ConfigError, LengthError, ShapeError
from miae.geometry import frames_from_coords
from miae.losses import N_AA, N_DIR_BINS, N_DIR_SLOTS, N_DIST_BINS
from miae.masking import MaskPlan, full_plan
from miae.structure_io import UNKNOWN_INDEX, ProteinBackbone

CHECKPOINT_FORMAT = "miae-checkpoint"
CHECKPOINT_VERSION = 1
# N, CA, C of an ideal residue in its own frame; initial coordinate-head bias
IDEAL_RESIDUE = (-0.5272, 1.3593, 0.0, 0.0, 0.0, 0.0, 1.525, 0.0, 0.0)


@dataclass
class ModelConfig:
    encoder_depth: int = 12
    geometric_blocks: int = 2
    hidden_dim: int = 768
    attention_heads: int = 12
    decoder_depth: int = 2
    decoder_dim: int = 512
    decoder_heads: int = 8
    pair_dim: int = 128
    mlp_ratio: float = 4.0
    use_sequence: bool = False
    use_inverse_folding_loss: bool = True
    max_length: int = 1024

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and v <= 0 and f.name != "geometric_blocks":
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if self.geometric_blocks < 0:
            raise ConfigError("geometric_blocks must be non-negative")
        if self.hidden_dim % self.attention_heads:
            raise ConfigError("hidden_dim must be divisible by attention_heads")
        if self.decoder_dim % self.decoder_heads or (self.decoder_dim // self.decoder_heads) % 2:
            raise ConfigError("decoder head width must be an even integer")
        if self.hidden_dim % 2:
            raise ConfigError("hidden_dim must be even for sinusoidal positions")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            base = PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(**{**base, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model option(s): {sorted(unknown)}")
        return cls.preset(preset, **d) if preset else cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "MiAE-S": dict(encoder_depth=6, hidden_dim=512, attention_heads=8),
    "MiAE-B": dict(encoder_depth=12, hidden_dim=768, attention_heads=12),
    "MiAE-L": dict(encoder_depth=24, hidden_dim=1024, attention_heads=16),
    "tiny": dict(encoder_depth=2, hidden_dim=64, attention_heads=4, decoder_depth=2,
                 decoder_dim=64, decoder_heads=4, pair_dim=32, max_length=256),
}


# --------------------------------------------------------------------- layers


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    inv = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64,
                                                      device=positions.device) / dim)
    ang = positions.to(torch.float64)[..., None] * inv
    pe = torch.stack([ang.sin(), ang.cos()], -1).flatten(-2)
    return pe


def apply_rotary(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Rotate channel pairs (first half, second half) of ``x`` (B, H, T, d)."""
    d = x.shape[-1]
    inv = 1.0 / (10000.0 ** (torch.arange(0, d, 2, dtype=torch.float64, device=x.device) / d))
    ang = positions.to(torch.float64)[:, None, :, None] * inv
    cos, sin = ang.cos().to(x.dtype), ang.sin().to(x.dtype)
    x1, x2 = x[..., : d // 2], x[..., d // 2:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], -1)


class FeedForward(nn.Module):
    def __init__(self, dim, mult=4.0):
        super().__init__()
        hidden = int(dim * mult)
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


class GeometricAttention(nn.Module):
    """Global frame-aware attention, one rotation vector and one point per head.

    Queries and keys are rotated into the global frame by each residue's
    rotation (direction term) or mapped as points (distance term); values are
    points aggregated globally and pulled back into the query frame. Every
    quantity seen by the output is invariant to a global rigid motion.
    """

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.to_rot_qk = nn.Linear(dim, 2 * heads * 3, bias=False)
        self.to_dist_qk = nn.Linear(dim, 2 * heads * 3, bias=False)
        self.to_v = nn.Linear(dim, heads * 3, bias=False)
        self.rot_weight = nn.Parameter(torch.zeros(heads))
        self.dist_weight = nn.Parameter(torch.zeros(heads))
        self.to_out = nn.Linear(heads * 3, dim)

    def attend(self, x, rotations, translations, mask=None):
        """Return per-head local points (B, V, H, 3) and attention (B, H, V, V)."""
        b, v, _ = x.shape
        h = self.heads

        def rotate(vec):
            return torch.einsum("bnij,bnhj->bnhi", rotations, vec)

        t = translations[:, :, None, :]
        q_rot, k_rot = rotate(self.to_rot_qk(x).view(b, v, 2 * h, 3)).split(h, dim=2)
        q_pt, k_pt = (rotate(self.to_dist_qk(x).view(b, v, 2 * h, 3)) + t).split(h, dim=2)

        rot_logits = torch.einsum("bihd,bjhd->bhij", q_rot, k_rot) / math.sqrt(3.0)
        diff = q_pt[:, :, None] - k_pt[:, None, :]
        dist = torch.sqrt((diff * diff).sum(-1) + 1e-10).permute(0, 3, 1, 2)
        logits = (F.softplus(self.rot_weight)[:, None, None] * rot_logits
                  - F.softplus(self.dist_weight)[:, None, None] * dist)
        if mask is not None:
            logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(-1)

        values = rotate(self.to_v(x).view(b, v, h, 3)) + t
        agg = torch.einsum("bhij,bjhd->bihd", attn, values) - t
        local = torch.einsum("bnji,bnhj->bnhi", rotations, agg)
        return local, attn

    def forward(self, x, rotations, translations, mask=None):
        local, _ = self.attend(x, rotations, translations, mask)
        return self.to_out(local.flatten(-2))


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, rotary=False):
        super().__init__()
        self.heads = heads
        self.rotary = rotary
        self.to_qkv = nn.Linear(dim, 3 * dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, mask=None, positions=None, return_attention=False):
        b, n, d = x.shape
        q, k, v = self.to_qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        if self.rotary:
            q, k = apply_rotary(q, positions), apply_rotary(k, positions)
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if mask is not None:
            logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(-1)
        out = self.to_out((attn @ v).transpose(1, 2).reshape(b, n, d))
        return (out, attn) if return_attention else out


class GeometricBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = GeometricAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mlp_ratio)

    def forward(self, x, rotations, translations, mask=None):
        x = x + self.attn(self.norm1(x), rotations, translations, mask)
        return x + self.ff(self.norm2(x))


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0, rotary=False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rotary=rotary)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mlp_ratio)

    def forward(self, x, mask=None, positions=None):
        x = x + self.attn(self.norm1(x), mask, positions)
        return x + self.ff(self.norm2(x))


# ---------------------------------------------------------------------- batch


@dataclass
class Batch:
    """Padded model inputs for a list of backbones and their mask plans."""

    ids: list
    coords: np.ndarray            # (B, L, 3, 3) ground truth, zero padded
    lengths: np.ndarray           # (B,)
    aatype: torch.Tensor          # (B, L)
    residue_mask: torch.Tensor    # (B, L) bool
    visible_index: torch.Tensor   # (B, V), padded with L
    visible_mask: torch.Tensor    # (B, V) bool
    rotations: torch.Tensor       # (B, V, 3, 3)
    translations: torch.Tensor    # (B, V, 3)
    plans: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    @property
    def visible_aatype(self) -> torch.Tensor:
        idx = self.visible_index.clamp(max=self.aatype.shape[1] - 1)
        return torch.gather(self.aatype, 1, idx)


def collate(backbones: list[ProteinBackbone], plans: list[MaskPlan] | None = None,
            dtype=torch.float32, max_length: int | None = None) -> Batch:
    plans = plans or [full_plan(len(b)) for b in backbones]
    if len(plans) != len(backbones):
        raise ShapeError("one mask plan per backbone is required")
    B = len(backbones)
    lengths = np.array([len(b) for b in backbones])
    if max_length is not None and lengths.max() > max_length:
        i = int(lengths.argmax())
        raise LengthError(f"{backbones[i].id}: length {lengths[i]} exceeds max_length {max_length}")
    L = int(lengths.max())
    V = max(len(p.visible) for p in plans)
    coords = np.zeros((B, L, 3, 3))
    aatype = np.full((B, L), UNKNOWN_INDEX, dtype=np.int64)
    residue_mask = np.zeros((B, L), dtype=bool)
    vis_index = np.full((B, V), L, dtype=np.int64)
    vis_mask = np.zeros((B, V), dtype=bool)
    rots = np.tile(np.eye(3), (B, V, 1, 1))
    trans = np.zeros((B, V, 3))
    for i, (bb, plan) in enumerate(zip(backbones, plans)):
        n = len(bb)
        if plan.n != n:
            raise ShapeError(f"{bb.id}: plan covers {plan.n} residues, backbone has {n}")
        coords[i, :n] = bb.coords
        aatype[i, :n] = bb.aatype
        residue_mask[i, :n] = True
        k = len(plan.visible)
        frames = frames_from_coords(bb.coords[plan.visible])
        vis_index[i, :k] = plan.visible
        vis_mask[i, :k] = True
        rots[i, :k] = frames.rotations
        trans[i, :k] = frames.translations
    return Batch(
        ids=[b.id for b in backbones],
        coords=coords,
        lengths=lengths,
        aatype=torch.from_numpy(aatype),
        residue_mask=torch.from_numpy(residue_mask),
        visible_index=torch.from_numpy(vis_index),
        visible_mask=torch.from_numpy(vis_mask),
        rotations=torch.as_tensor(rots, dtype=dtype),
        translations=torch.as_tensor(trans, dtype=dtype),
        plans=list(plans),
    )


# --------------------------------------------------------------------- models


class MiAEEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.init_embedding = nn.Parameter(torch.randn(d) * 0.02)
        self.geometric = nn.ModuleList(
            GeometricBlock(d, cfg.attention_heads, cfg.mlp_ratio) for _ in range(cfg.geometric_blocks))
        self.aa_embedding = nn.Embedding(N_AA + 1, d) if cfg.use_sequence else None
        if self.aa_embedding is not None:
            nn.init.normal_(self.aa_embedding.weight, std=0.02)
        self.cls_token = nn.Parameter(torch.randn(d) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.attention_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth))
        self.norm = nn.LayerNorm(d)

    def forward(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        """Latents (B, V + 1, D) with the class token last, and their validity mask."""
        mask = batch.visible_mask
        b, v = mask.shape
        dtype = self.init_embedding.dtype
        rots = batch.rotations.to(dtype)
        trans = batch.translations.to(dtype)
        x = self.init_embedding.expand(b, v, -1)
        for blk in self.geometric:
            x = blk(x, rots, trans, mask)
        x = x + sinusoidal_embedding(batch.visible_index, self.cfg.hidden_dim).to(dtype)
        if self.aa_embedding is not None:
            x = x + self.aa_embedding(batch.visible_aatype)
        x = torch.cat([x, self.cls_token.expand(b, 1, -1)], 1)
        mask = torch.cat([mask, torch.ones(b, 1, dtype=torch.bool)], 1)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x), mask

    def layer_id(self, name: str) -> int:
        """Depth index used for layer-wise learning-rate decay (head = num_layers)."""
        if name.startswith(("init_embedding", "aa_embedding", "cls_token")):
            return 0
        if name.startswith("geometric."):
            return int(name.split(".")[1]) + 1
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1 + self.cfg.geometric_blocks
        return self.num_layers

    @property
    def num_layers(self) -> int:
        return self.cfg.geometric_blocks + self.cfg.encoder_depth + 1


class MiAEDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dd, p = cfg.decoder_dim, cfg.pair_dim
        self.proj = nn.Linear(cfg.hidden_dim, dd)
        self.mask_token = nn.Parameter(torch.randn(dd) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(dd, cfg.decoder_heads, cfg.mlp_ratio, rotary=True)
            for _ in range(cfg.decoder_depth))
        self.norm = nn.LayerNorm(dd)
        self.coord_head = nn.Linear(dd, 9)
        with torch.no_grad():
            self.coord_head.bias.copy_(torch.tensor(IDEAL_RESIDUE))
        self.pair_a = nn.Linear(dd, p)
        self.pair_b = nn.Linear(dd, p, bias=False)
        self.dist_head = nn.Linear(p, N_DIST_BINS)
        self.dir_head = nn.Linear(p, N_DIR_SLOTS * N_DIR_BINS)
        self.aa_head = nn.Linear(dd, N_AA)

    def forward(self, latents, batch: Batch) -> dict:
        b, L = batch.residue_mask.shape
        # the class token (last latent) stays out of the reconstruction path
        vis = self.proj(latents[:, :-1])
        dd = vis.shape[-1]
        idx = batch.visible_index
        # slot L collects padded visible entries and is discarded
        scattered = torch.zeros(b, L + 1, dd, dtype=vis.dtype).scatter(
            1, idx[..., None].expand(-1, -1, dd), vis)
        seen = torch.zeros(b, L + 1, dtype=torch.bool).scatter(1, idx, batch.visible_mask)
        x = torch.where(seen[..., None], scattered, self.mask_token)[:, :L]
        positions = torch.arange(L).expand(b, -1)
        for blk in self.blocks:
            x = blk(x, batch.residue_mask, positions)
        hres = self.norm(x)
        z = F.gelu(self.pair_a(hres)[:, :, None] + self.pair_b(hres)[:, None, :])
        return {
            "coords": self.coord_head(hres).view(b, L, 3, 3),
            "pair_repr": z,
            "dist_logits": self.dist_head(z),
            "dir_logits": self.dir_head(z).view(b, L, L, N_DIR_SLOTS, N_DIR_BINS),
            "aa_logits": self.aa_head(hres),
        }


class MiAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = MiAEEncoder(cfg)
        self.decoder = MiAEDecoder(cfg)

    def forward(self, batch: Batch) -> dict:
        latents, _ = self.encoder(batch)
        return self.decoder(latents, batch)


class FoldClassifier(nn.Module):
    """Encoder plus a linear head on the class token or on mean-pooled residues."""

    def __init__(self, cfg: ModelConfig, num_classes: int, pooling: str = "cls"):
        super().__init__()
        if pooling not in ("cls", "mean"):
            raise ConfigError(f"pooling must be 'cls' or 'mean', got {pooling!r}")
        self.cfg = cfg
        self.pooling = pooling
        self.encoder = MiAEEncoder(cfg)
        self.head = nn.Linear(cfg.hidden_dim, num_classes)

    def forward(self, batch: Batch) -> torch.Tensor:
        latents, mask = self.encoder(batch)
        return self.head(pool(latents, mask, self.pooling))

    def layer_id(self, name: str) -> int:
        if name.startswith("encoder."):
            return self.encoder.layer_id(name[len("encoder."):])
        return self.encoder.num_layers


def pool(latents: torch.Tensor, mask: torch.Tensor, pooling: str) -> torch.Tensor:
    """Class token, or the mean over valid residue tokens."""
    if pooling == "cls":
        return latents[:, -1]
    m = mask[:, :-1, None].to(latents.dtype)
    return (latents[:, :-1] * m).sum(1) / m.sum(1)


# ------------------------------------------------------- single-structure API


def encode(model: MiAE | MiAEEncoder, b: ProteinBackbone, plan: MaskPlan | None = None) -> torch.Tensor:
    """Latents for one structure, shape (|visible| + 1, hidden_dim)."""
    encoder = model.encoder if isinstance(model, (MiAE, FoldClassifier)) else model
    plan = plan or full_plan(len(b))
    batch = collate([b], [plan], dtype=encoder.init_embedding.dtype, max_length=encoder.cfg.max_length)
    latents, _ = encoder(batch)
    return latents[0]


def decode(model: MiAE, latents: torch.Tensor, plan: MaskPlan, b: ProteinBackbone | None = None) -> dict:
    """Decoder outputs for one structure from ``encode`` latents."""
    if latents.shape[0] != len(plan.visible) + 1:
        raise ShapeError(f"latents have {latents.shape[0]} tokens, plan expects {len(plan.visible) + 1}")
    if b is None:
        b = ProteinBackbone("decode", np.zeros((plan.n, 3, 3)), ["X"] * plan.n, np.zeros(plan.n))
    batch = _index_only_batch(b, plan)
    out = model.decoder(latents[None], batch)
    return {k: v[0] for k, v in out.items()}


def _index_only_batch(b, plan):
    n = plan.n
    return Batch(
        ids=[b.id], coords=b.coords[None], lengths=np.array([n]),
        aatype=torch.from_numpy(b.aatype[None]),
        residue_mask=torch.ones(1, n, dtype=torch.bool),
        visible_index=torch.from_numpy(np.asarray(plan.visible, dtype=np.int64)[None]),
        visible_mask=torch.ones(1, len(plan.visible), dtype=torch.bool),
        rotations=torch.empty(0), translations=torch.empty(0), plans=[plan],
    )


def unpad_outputs(outputs: dict, i: int, n: int) -> dict:
    return {
        "coords": outputs["coords"][i, :n],
        "dist_logits": outputs["dist_logits"][i, :n, :n],
        "dir_logits": outputs["dir_logits"][i, :n, :n],
        "aa_logits": outputs["aa_logits"][i, :n],
    }


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: nn.Module, kind: str, step: int = 0, optimizer=None,
                    extra: dict | None = None) -> None:
    """Write a torch container with format tag, version, config and tensors.

    ``kind`` is ``"autoencoder"`` (MiAE) or ``"classifier"`` (FoldClassifier).
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": model.cfg.to_dict(),
        "step": int(step),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    for k, v in payload["state_dict"].items():
        if v.is_floating_point() and not torch.isfinite(v).all():
            raise ConfigError(f"{path}: parameter {k} has non-finite entries")
    return payload


def model_from_checkpoint(path_or_payload, dtype=torch.float32) -> nn.Module:
    payload = path_or_payload if isinstance(path_or_payload, dict) else load_checkpoint(path_or_payload)
    cfg = ModelConfig.from_dict(payload["config"])
    if payload["kind"] == "classifier":
        extra = payload["extra"]
        model = FoldClassifier(cfg, extra["num_classes"], extra.get("pooling", "cls"))
    else:
        model = MiAE(cfg)
    model.load_state_dict(payload["state_dict"])
    return model.to(dtype)
