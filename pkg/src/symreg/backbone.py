"""Shared transformer over token sequences, conditioned on a point-set embedding.

One architecture serves both generation styles. Common path: token embedding
plus a fixed sinusoidal positional table, per-position concatenation with the
condition vector followed by a linear merge, L pre-norm blocks of
self-attention and feedforward with residuals, a final layer norm, and a
linear projection to per-position vocabulary logits.

Mode differences (and nothing else):
  - diffusion: bidirectional attention, plus a timestep embedding (sinusoidal
    followed by a two-layer perceptron) added to every position;
  - autoregressive: strict causal mask, one extra BOS token id appended to
    the vocabulary for next-token conditioning, no timestep input.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
from torch import nn

from .encoder import PointEncoder
from .errors import MissingTimestep, ShapeMismatch

MODE_DIFFUSION = "diffusion"
MODE_AR = "autoregressive"


@dataclass
class BackboneConfig:
    embed_dim: int = 512
    num_heads: int = 8
    num_layers: int = 8
    ff_dim: int = 2048
    dropout: float = 0.15
    max_len: int = 32
    vocab_size: int = 13
    mode: str = MODE_DIFFUSION
    num_steps: Optional[int] = 1000  # diffusion only

    def __post_init__(self):
        if self.mode not in (MODE_DIFFUSION, MODE_AR):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        for name in ("embed_dim", "num_heads", "num_layers", "ff_dim", "max_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mode == MODE_DIFFUSION:
            if self.num_steps is None or self.num_steps < 2:
                raise ValueError("diffusion mode needs num_steps >= 2")
        else:
            self.num_steps = None

    @property
    def n_embeddings(self) -> int:
        """Embedding/logit count; autoregressive mode appends one BOS id."""
        return self.vocab_size + (1 if self.mode == MODE_AR else 0)

    @property
    def bos_id(self) -> int:
        if self.mode != MODE_AR:
            raise ValueError("BOS exists only in autoregressive mode")
        return self.vocab_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    """Fixed (length, dim) sin/cos position table, float64."""
    return sinusoidal_embedding(torch.arange(length, dtype=torch.float64), dim)


def sinusoidal_embedding(pos: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos features of arbitrary positions: (...,) -> (..., dim)."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    ).to(pos.device)
    ang = pos.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feedforward, both with residuals."""

    def __init__(self, embed_dim: int, num_heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(embed_dim)
        self.attn = nn.MultiheadAttention(embed_dim, num_heads, dropout=dropout, batch_first=True)
        self.drop1 = nn.Dropout(dropout)
        self.ln2 = nn.LayerNorm(embed_dim)
        self.ff = nn.Sequential(
            nn.Linear(embed_dim, ff_dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(ff_dim, embed_dim),
        )
        self.drop2 = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, attn_mask: Optional[torch.Tensor]) -> torch.Tensor:
        h = self.ln1(x)
        a, _ = self.attn(h, h, h, attn_mask=attn_mask, need_weights=False)
        x = x + self.drop1(a)
        x = x + self.drop2(self.ff(self.ln2(x)))
        return x


class TransformerBackbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        e, s = config.embed_dim, config.max_len
        self.token_emb = nn.Embedding(config.n_embeddings, e)
        self.register_buffer("pos_table", sinusoidal_table(s, e).to(torch.float32))
        if config.mode == MODE_DIFFUSION:
            self.time_fc1 = nn.Linear(e, e)
            self.time_fc2 = nn.Linear(e, e)
        self.cond_proj = nn.Linear(2 * e, e)
        self.emb_drop = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            TransformerBlock(e, config.num_heads, config.ff_dim, config.dropout)
            for _ in range(config.num_layers)
        )
        self.final_ln = nn.LayerNorm(e)
        self.out_proj = nn.Linear(e, config.n_embeddings)
        causal = torch.triu(torch.ones(s, s, dtype=torch.bool), diagonal=1)
        self.register_buffer("causal_mask", causal)

    def forward(
        self,
        tokens: torch.Tensor,
        condition: torch.Tensor,
        timesteps: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """(B, S) ids + (B, E) condition (+ (B,) timesteps in diffusion mode)
        -> (B, S, n_embeddings) logits."""
        cfg = self.config
        b, s = tokens.shape[0], tokens.shape[-1]
        if tokens.dim() != 2 or s != cfg.max_len:
            raise ShapeMismatch(f"expected (B, {cfg.max_len}) tokens, got {tuple(tokens.shape)}")
        if condition.shape != (b, cfg.embed_dim):
            raise ShapeMismatch(
                f"expected ({b}, {cfg.embed_dim}) condition, got {tuple(condition.shape)}")
        if tokens.max() >= cfg.n_embeddings or tokens.min() < 0:
            raise ShapeMismatch("token id out of range")
        if cfg.mode == MODE_DIFFUSION:
            if timesteps is None:
                raise MissingTimestep("diffusion forward needs timesteps")
            if timesteps.shape != (b,):
                raise ShapeMismatch(f"expected ({b},) timesteps, got {tuple(timesteps.shape)}")
        elif timesteps is not None:
            raise ShapeMismatch("timesteps are a diffusion-mode input")

        dtype = self.cond_proj.weight.dtype
        h = self.token_emb(tokens) + self.pos_table.to(dtype)[None, :, :]
        if cfg.mode == MODE_DIFFUSION:
            temb = sinusoidal_embedding(timesteps, cfg.embed_dim).to(dtype)
            temb = self.time_fc2(torch.relu(self.time_fc1(temb)))
            h = h + temb[:, None, :]
        cond = condition[:, None, :].expand(b, s, cfg.embed_dim)
        h = self.cond_proj(torch.cat([h, cond], dim=-1))
        h = self.emb_drop(h)
        mask = self.causal_mask if cfg.mode == MODE_AR else None
        for blk in self.blocks:
            h = blk(h, mask)
        return self.out_proj(self.final_ln(h))


class SequenceModel(nn.Module):
    """Point encoder + transformer, the full trainable network for one mode."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.encoder = PointEncoder(config.embed_dim)
        self.backbone = TransformerBackbone(config)

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        return self.encoder(points)

    def forward(
        self,
        points: torch.Tensor,
        tokens: torch.Tensor,
        timesteps: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        return self.backbone(tokens, self.encoder(points), timesteps)


# --- architecture parity -----------------------------------------------------

#: Config fields allowed to differ between the two modes.
MODE_SPECIFIC_CONFIG_FIELDS = frozenset({"mode", "num_steps"})

#: Parameter names allowed to differ (BOS row in embeddings/logits, timestep
#: perceptron present only in diffusion mode).
MODE_SPECIFIC_PARAM_PREFIXES = (
    "backbone.token_emb.",
    "backbone.out_proj.",
    "backbone.time_fc1.",
    "backbone.time_fc2.",
)


def config_parity_diff(a: BackboneConfig, b: BackboneConfig) -> Dict[str, Tuple]:
    """Names and values of config fields that differ between two setups."""
    out: Dict[str, Tuple] = {}
    for f in dataclasses.fields(BackboneConfig):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if va != vb:
            out[f.name] = (va, vb)
    return out


def parameter_parity_diff(a: nn.Module, b: nn.Module) -> Dict[str, Tuple]:
    """Parameter/buffer names whose shapes differ (or exist on one side only)."""
    sa = {k: tuple(v.shape) for k, v in a.state_dict().items()}
    sb = {k: tuple(v.shape) for k, v in b.state_dict().items()}
    out: Dict[str, Tuple] = {}
    for k in sorted(set(sa) | set(sb)):
        if sa.get(k) != sb.get(k):
            out[k] = (sa.get(k), sb.get(k))
    return out
