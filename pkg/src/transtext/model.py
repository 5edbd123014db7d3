"""Velocity prediction transformer over patchified joint-video latents.

Tokens are spatial patches per latent frame. Each block runs self-attention
over all tokens, cross-attention to the condition tokens (one effect token
followed by patchified reference tokens), and a GELU MLP, all pre-normalized
residual sublayers. Two optional masks ablate information flow: one blocks
alpha-half queries from RGB-half keys in self-attention, the other blocks
alpha-half queries from the effect token in cross-attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .layout import LayoutMode


class MaskMode(Enum):
    NONE = "none"
    SELF_ALPHA_TO_RGB = "self_alpha_to_rgb"
    CROSS_COND_TO_ALPHA = "cross_cond_to_alpha"


@dataclass
class DenoiserConfig:
    patch_size: int = 2
    embed_dim: int = 64
    blocks: int = 2
    heads: int = 4
    mask_mode: MaskMode = MaskMode.NONE

    def __post_init__(self) -> None:
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}"
            )
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.blocks < 0:
            raise ValueError(f"blocks must be >= 0, got {self.blocks}")


def sinusoidal_embedding(t: Tensor, dim: int, scale: float = 1000.0) -> Tensor:
    """Classic sin/cos features of a scalar time in [0,1], shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * scale * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def alpha_token_mask(layout: LayoutMode, frames: int, grid_h: int, grid_w: int) -> Tensor:
    """Boolean (frames*grid_h*grid_w,) marking tokens in the alpha half."""
    if layout is LayoutMode.WIDTH:
        if grid_w % 2:
            raise ValueError(f"token grid width {grid_w} not splittable in half")
        col = torch.arange(grid_w) >= grid_w // 2
        per_frame = col[None, :].expand(grid_h, grid_w)
        return per_frame.reshape(-1).repeat(frames)
    if layout is LayoutMode.HEIGHT:
        if grid_h % 2:
            raise ValueError(f"token grid height {grid_h} not splittable in half")
        row = torch.arange(grid_h) >= grid_h // 2
        per_frame = row[:, None].expand(grid_h, grid_w)
        return per_frame.reshape(-1).repeat(frames)
    if frames % 2:
        raise ValueError(f"frame count {frames} not splittable in half")
    frame_is_alpha = torch.arange(frames) >= frames // 2
    return frame_is_alpha[:, None].expand(frames, grid_h * grid_w).reshape(-1)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, n, self.heads, -1).transpose(1, 2)
        k = k.view(b, n, self.heads, -1).transpose(1, 2)
        v = v.view(b, n, self.heads, -1).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, cond: Tensor, mask: Tensor | None = None) -> Tensor:
        b, n, d = x.shape
        m = cond.shape[1]
        q = self.q(x).view(b, n, self.heads, -1).transpose(1, 2)
        k, v = self.kv(cond).chunk(2, dim=-1)
        k = k.view(b, m, self.heads, -1).transpose(1, 2)
        v = v.view(b, m, self.heads, -1).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
        )

    def forward(self, x: Tensor, cond: Tensor, self_mask, cross_mask) -> Tensor:
        x = x + self.self_attn(self.norm1(x), self_mask)
        x = x + self.cross_attn(self.norm2(x), cond, cross_mask)
        x = x + self.mlp(self.norm3(x))
        return x


class Denoiser(nn.Module):
    """Maps a noisy latent grid plus time and condition to a velocity grid."""

    def __init__(
        self,
        cfg: DenoiserConfig,
        latent_shape: tuple[int, int, int, int],
        ref_shape: tuple[int, int, int],
        layout: LayoutMode,
        num_effects: int,
    ):
        super().__init__()
        self.cfg = cfg
        self.latent_shape = tuple(latent_shape)
        self.ref_shape = tuple(ref_shape)
        self.layout = layout
        f, c, h, w = self.latent_shape
        p = cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"patch size {p} must divide latent grid {h}x{w}")
        rc, rh, rw = self.ref_shape
        if rh % p or rw % p:
            raise ValueError(f"patch size {p} must divide reference grid {rh}x{rw}")
        self.grid = (f, h // p, w // p)
        self.tokens = f * self.grid[1] * self.grid[2]
        self.ref_tokens = (rh // p) * (rw // p)
        d = cfg.embed_dim

        if self.ref_tokens != self.grid[1] * self.grid[2]:
            raise ValueError(
                f"reference grid {rh // p}x{rw // p} must match the per-frame "
                f"token grid {self.grid[1]}x{self.grid[2]}"
            )

        self.patch_in = nn.Conv2d(c, d, kernel_size=p, stride=p)
        # factorized learned positions: per-frame code plus a spatial code that
        # reference tokens share, so cross-attention gets positional
        # correspondence between the latent grid and the conditioning image
        self.frame_emb = nn.Parameter(torch.zeros(f, d))
        self.space_emb = nn.Parameter(torch.zeros(self.grid[1] * self.grid[2], d))
        # learned projection keeps the time signal at the same scale as
        # patch content instead of drowning it
        self.time_proj = nn.Linear(d, d)
        self.ref_patch_in = nn.Conv2d(rc, d, kernel_size=p, stride=p)
        self.effect_emb = nn.Embedding(num_effects, d)
        self.null_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads) for _ in range(cfg.blocks))
        self.norm_out = nn.LayerNorm(d)
        self.patch_out = nn.Linear(d, c * p * p)

        is_alpha = alpha_token_mask(layout, *self.grid)
        self_mask = None
        cross_mask = None
        if cfg.mask_mode is MaskMode.SELF_ALPHA_TO_RGB:
            # alpha queries may not look at RGB keys
            self_mask = ~(is_alpha[:, None] & ~is_alpha[None, :])
        elif cfg.mask_mode is MaskMode.CROSS_COND_TO_ALPHA:
            # alpha queries may not look at the effect token (slot 0)
            cross_mask = torch.ones(self.tokens, 1 + self.ref_tokens, dtype=torch.bool)
            cross_mask[is_alpha, 0] = False
        self.register_buffer("alpha_tokens", is_alpha, persistent=False)
        self.register_buffer("self_mask", self_mask, persistent=False)
        self.register_buffer("cross_mask", cross_mask, persistent=False)

    def init_parameters(self, generator: torch.Generator) -> None:
        """Seeded init: Xavier projections, trunc-normal(0.02) embeddings,
        zero-initialized output head and biases."""
        phi = math.erf(2.0 / math.sqrt(2.0))  # mass within +/- 2 sigma
        embeddings = {"frame_emb", "space_emb", "effect_emb.weight", "null_token"}
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "norm" in name and name.endswith("weight"):
                    nn.init.ones_(p)
                elif name.endswith("bias") or name.startswith("patch_out"):
                    nn.init.zeros_(p)
                elif name in embeddings:
                    u = torch.rand(p.shape, generator=generator, dtype=torch.float64)
                    z = math.sqrt(2.0) * torch.erfinv((2.0 * u - 1.0) * phi)
                    p.copy_((0.02 * z).to(p.dtype))
                else:
                    fan_out, fan_in = p.shape[0], p.numel() // p.shape[0]
                    bound = math.sqrt(6.0 / (fan_in + fan_out))
                    u = torch.rand(p.shape, generator=generator, dtype=torch.float64)
                    p.copy_((bound * (2.0 * u - 1.0)).to(p.dtype))

    def _tokenize(self, x: Tensor) -> Tensor:
        b, f, c, h, w = x.shape
        out = self.patch_in(x.reshape(b * f, c, h, w))
        d = out.shape[1]
        return out.flatten(2).transpose(1, 2).reshape(b, f * self.grid[1] * self.grid[2], d)

    def _untokenize(self, tokens: Tensor, batch: int) -> Tensor:
        f, c, h, w = self.latent_shape
        p = self.cfg.patch_size
        gh, gw = self.grid[1], self.grid[2]
        x = self.patch_out(self.norm_out(tokens))
        x = x.view(batch * f, gh, gw, c, p, p)
        x = x.permute(0, 3, 1, 4, 2, 5).reshape(batch * f, c, h, w)
        return x.view(batch, f, c, h, w)

    def condition_tokens(
        self,
        batch: int,
        effect_ids: Tensor | None,
        ref: Tensor | None,
        drop: Tensor | None,
        dtype: torch.dtype,
        device: torch.device,
    ) -> Tensor:
        m = 1 + self.ref_tokens
        null = self.null_token.view(1, 1, -1).to(dtype).expand(batch, m, -1)
        if effect_ids is None or ref is None:
            return null
        eff = self.effect_emb(effect_ids)[:, None, :]
        rt = self.ref_patch_in(ref).flatten(2).transpose(1, 2) + self.space_emb
        cond = torch.cat([eff, rt], dim=1)
        if drop is not None and bool(drop.any()):
            cond = torch.where(drop[:, None, None], null, cond)
        return cond

    def forward(
        self,
        x: Tensor,
        t: Tensor,
        effect_ids: Tensor | None = None,
        ref: Tensor | None = None,
        drop: Tensor | None = None,
        unconditional: bool = False,
    ) -> Tensor:
        if x.shape[1:] != torch.Size(self.latent_shape):
            raise ValueError(f"input shape {tuple(x.shape[1:])} != model grid {self.latent_shape}")
        if not unconditional and (effect_ids is None or ref is None):
            raise ValueError("condition required; pass unconditional=True for the CFG null branch")
        b = x.shape[0]
        if t.ndim == 0:
            t = t.expand(b)
        temb = self.time_proj(sinusoidal_embedding(t.to(x.dtype), self.cfg.embed_dim))
        f = self.grid[0]
        spp = self.grid[1] * self.grid[2]
        pos = self.frame_emb.repeat_interleave(spp, dim=0) + self.space_emb.repeat(f, 1)
        tokens = self._tokenize(x) + pos + temb[:, None, :]
        cond = self.condition_tokens(
            b, None if unconditional else effect_ids, None if unconditional else ref, drop,
            x.dtype, x.device,
        )
        for block in self.blocks:
            tokens = block(tokens, cond, self.self_mask, self.cross_mask)
        return self._untokenize(tokens, b)
