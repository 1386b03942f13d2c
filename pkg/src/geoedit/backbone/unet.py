"""Desk-scale denoising U-Net with timestep and prompt conditioning.

Residual blocks with group norm, sinusoidal timestep embedding, and
single-head self/cross attention at the configured token grids. Every
attention layer consults the routing context passed to `predict_noise`;
without a context it falls through to plain attention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from ..attention import plain_attention
from .conditioning import ConditionEmbedding, PromptEncoder


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 64
    in_channels: int = 3
    base_channels: int = 24
    levels: int = 3
    channel_mult: tuple = (1, 2, 2)
    attention_grids: tuple = (16, 8)
    embed_dim: int = 96
    cond_dim: int = 48
    vocab_size: int = 512
    cond_tokens: int = 8
    seed: int = 0

    def __post_init__(self):
        if len(self.channel_mult) != self.levels:
            raise ValueError("channel_mult must have one entry per level")
        if self.resolution % (1 << self.levels) != 0:
            raise ValueError("resolution must be divisible by 2**levels (mid block grid)")
        produced = self.produced_grids()
        bad = set(self.attention_grids) - set(produced)
        if bad:
            raise ValueError(f"attention grids {sorted(bad)} not produced by the level structure {produced}")

    def produced_grids(self) -> tuple:
        enc = [self.resolution >> i for i in range(self.levels)]
        return tuple(enc + [self.resolution >> self.levels])

    @property
    def mid_grid(self) -> int:
        return self.resolution >> self.levels

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "levels": self.levels,
            "channel_mult": list(self.channel_mult),
            "attention_grids": list(self.attention_grids),
            "embed_dim": self.embed_dim,
            "cond_dim": self.cond_dim,
            "vocab_size": self.vocab_size,
            "cond_tokens": self.cond_tokens,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        d["attention_grids"] = tuple(d["attention_grids"])
        return DenoiserConfig(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, embed_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(embed_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttentionLayer(nn.Module):
    def __init__(self, channels: int, layer_id: str, grid: int):
        super().__init__()
        self.layer_id = layer_id
        self.grid = grid
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, ctx=None):
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q, k, v = self.to_q(tokens), self.to_k(tokens), self.to_v(tokens)
        if ctx is not None:
            if b != 1:
                raise ValueError("attention routing requires batch size 1")
            out = ctx.process_self(self.layer_id, self.grid, q[0], k[0], v[0])[None]
        else:
            out = plain_attention(q, k, v)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class CrossAttentionLayer(nn.Module):
    def __init__(self, channels: int, cond_dim: int, layer_id: str, grid: int):
        super().__init__()
        self.layer_id = layer_id
        self.grid = grid
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(cond_dim, channels)
        self.to_v = nn.Linear(cond_dim, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, cond_tokens, ctx=None):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        if cond_tokens.ndim == 2:
            cond_tokens = cond_tokens[None].expand(b, -1, -1)
        k, v = self.to_k(cond_tokens), self.to_v(cond_tokens)
        if ctx is not None:
            if b != 1:
                raise ValueError("attention routing requires batch size 1")
            out = ctx.process_cross(
                self.layer_id, self.grid, q[0], k[0], v[0],
                project=lambda tok: (self.to_k(tok), self.to_v(tok)),
            )[None]
        else:
            out = plain_attention(q, k, v)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class _AttentionPair(nn.Module):
    """Self-attention followed by cross-attention at one grid site."""

    def __init__(self, channels: int, cond_dim: int, site: str, grid: int):
        super().__init__()
        self.self_attn = SelfAttentionLayer(channels, f"{site}.self", grid)
        self.cross_attn = CrossAttentionLayer(channels, cond_dim, f"{site}.cross", grid)

    def forward(self, x, cond_tokens, ctx=None):
        x = self.self_attn(x, ctx)
        return self.cross_attn(x, cond_tokens, ctx)


class Denoiser(nn.Module):
    """Noise-prediction U-Net; exposes per-layer attention routing hooks."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        cfg = config
        chans = [cfg.base_channels * m for m in cfg.channel_mult]

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.embed_dim), nn.SiLU(), nn.Linear(cfg.embed_dim, cfg.embed_dim)
        )
        self.prompt_encoder = PromptEncoder(cfg.vocab_size, cfg.cond_dim, cfg.cond_tokens)
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            grid = cfg.resolution >> i
            self.enc_blocks.append(ResBlock(prev, ch, cfg.embed_dim))
            self.enc_attn.append(
                _AttentionPair(ch, cfg.cond_dim, f"enc{grid}", grid) if grid in cfg.attention_grids else None
            )
            self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch

        mid_ch = chans[-1]
        self.mid_block1 = ResBlock(mid_ch, mid_ch, cfg.embed_dim)
        self.mid_attn = (
            _AttentionPair(mid_ch, cfg.cond_dim, f"mid{cfg.mid_grid}", cfg.mid_grid)
            if cfg.mid_grid in cfg.attention_grids
            else None
        )
        self.mid_block2 = ResBlock(mid_ch, mid_ch, cfg.embed_dim)

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        below = mid_ch
        for i in reversed(range(cfg.levels)):
            grid = cfg.resolution >> i
            ch = chans[i]
            self.ups.append(nn.Conv2d(below, ch, 3, padding=1))
            self.dec_blocks.append(ResBlock(ch + ch, ch, cfg.embed_dim))
            self.dec_attn.append(
                _AttentionPair(ch, cfg.cond_dim, f"dec{grid}", grid) if grid in cfg.attention_grids else None
            )
            below = ch

        self.norm_out = _norm(chans[0])
        self.conv_out = nn.Conv2d(chans[0], cfg.in_channels, 3, padding=1)

    # -- layer registry ------------------------------------------------

    def attention_layer_ids(self, kind: str = "self") -> list:
        """Ids of attention layers in forward order; kind is 'self' or 'cross'."""
        ids = []
        for pair in self._attention_pairs():
            layer = pair.self_attn if kind == "self" else pair.cross_attn
            ids.append(layer.layer_id)
        return ids

    def decoder_half_layer_ids(self, kind: str = "self") -> list:
        """Attention layers from the midpoint on (mid + decoder sites)."""
        return [i for i in self.attention_layer_ids(kind) if i.startswith(("mid", "dec"))]

    def _attention_pairs(self):
        for attn in self.enc_attn:
            if attn is not None:
                yield attn
        if self.mid_attn is not None:
            yield self.mid_attn
        for attn in self.dec_attn:
            if attn is not None:
                yield attn

    # -- conditioning ---------------------------------------------------

    def embed_prompt(self, text: str) -> ConditionEmbedding:
        return self.prompt_encoder.embed_prompt(text)

    def null_embedding(self) -> ConditionEmbedding:
        return self.prompt_encoder.embed_prompt("")

    # -- forward ---------------------------------------------------------

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond_tokens: torch.Tensor, ctx=None) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.config.embed_dim).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        for block, attn, down in zip(self.enc_blocks, self.enc_attn, self.downs):
            h = block(h, temb)
            if attn is not None:
                h = attn(h, cond_tokens, ctx)
            skips.append(h)
            h = down(h)
        h = self.mid_block1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, cond_tokens, ctx)
        h = self.mid_block2(h, temb)
        for up, block, attn in zip(self.ups, self.dec_blocks, self.dec_attn):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if attn is not None:
                h = attn(h, cond_tokens, ctx)
        return self.conv_out(F.silu(self.norm_out(h)))

    @torch.no_grad()
    def predict_noise(self, x_t: torch.Tensor, t: int, cond: ConditionEmbedding, ctx=None) -> torch.Tensor:
        """Noise prediction for one latent; deterministic given (weights, inputs, ctx)."""
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t = x_t[None]
        expected = (self.config.in_channels, self.config.resolution, self.config.resolution)
        if tuple(x_t.shape[1:]) != expected:
            raise ValueError(f"latent shape {tuple(x_t.shape[1:])} != {expected}")
        if not torch.isfinite(x_t).all():
            raise ValueError("latent contains non-finite values")
        if t < 1:
            raise ValueError(f"timestep {t} must be >= 1")
        tb = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        eps = self.forward(x_t, tb, cond.tokens, ctx)
        return eps[0] if squeeze else eps
