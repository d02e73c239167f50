"""Conditional denoiser: a small UNet with prompt cross-attention."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .prompt_encoder import multihead_attention

GROUPS = 8


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Interleaved ``[sin(t f_0), cos(t f_0), sin(t f_1), ...]`` with ``f_i = max_period^(-i/(dim/2))``.

    ``t`` is an int or a 1-d tensor of (1-based) timesteps.
    """
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    scalar = not isinstance(t, torch.Tensor)
    tt = torch.as_tensor(t, dtype=torch.float64).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = tt * freqs
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(-1, dim)
    return emb[0] if scalar else emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(GROUPS, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(GROUPS, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Queries from UNet features, keys and values from the prompt context.

    ``to_q`` only ever sees the feature map and ``to_k``/``to_v`` only the
    context. The output projection starts at zero, so a fresh layer is an
    identity on its input.
    """

    def __init__(self, channels: int, context_dim: int, heads: int = 4):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.channels = channels
        self.context_dim = context_dim
        self.norm = nn.GroupNorm(GROUPS, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def attend(self, phi: torch.Tensor, ctx: torch.Tensor, residual: torch.Tensor | None = None) -> torch.Tensor:
        if phi.shape[-1] != self.channels or ctx.shape[-1] != self.context_dim:
            raise DimensionError(
                f"features {tuple(phi.shape)} / context {tuple(ctx.shape)} do not fit "
                f"({self.channels}, {self.context_dim})"
            )
        out = multihead_attention(self.to_q(phi), self.to_k(ctx), self.to_v(ctx), self.heads)
        return (phi if residual is None else residual) + self.to_out(out)

    def forward(self, h: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = h.shape
        tokens = h.flatten(2).transpose(1, 2)
        phi = self.norm(h).flatten(2).transpose(1, 2)
        return self.attend(phi, ctx, residual=tokens).transpose(1, 2).reshape(b, c, hh, ww)


def cross_attention(phi: torch.Tensor, ctx: torch.Tensor, p: CrossAttention) -> torch.Tensor:
    """Residual cross-attention on flattened features ``N×d`` against context ``M×d_ctx``."""
    return p.attend(phi, ctx)


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    """Epsilon predictor.

    ``attn_levels`` lists the resolution levels (0 = full resolution) whose
    down and up blocks get cross-attention; the middle block always has one.
    ``in_channels`` may exceed ``out_channels`` when the blueprint features
    are concatenated instead of added.
    """

    def __init__(self, in_channels: int, out_channels: int, context_dim: int, base_width: int = 32,
                 channel_mults=(1, 2), num_res_blocks: int = 2, attn_levels=(1,), heads: int = 4):
        super().__init__()
        if base_width % GROUPS:
            raise ConfigError(f"base width must be a multiple of {GROUPS}")
        self.context_dim = context_dim
        self.base_width = base_width
        self.num_levels = len(channel_mults)
        temb_dim = 4 * base_width
        self.time_mlp = nn.Sequential(nn.Linear(base_width, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(in_channels, base_width, 3, padding=1)

        self.down = nn.ModuleList()
        skip_chs = [base_width]
        ch = base_width
        for level, mult in enumerate(channel_mults):
            out = base_width * mult
            for _ in range(num_res_blocks):
                block = nn.ModuleDict({"res": ResBlock(ch, out, temb_dim)})
                if level in attn_levels:
                    block["attn"] = CrossAttention(out, context_dim, heads)
                self.down.append(block)
                ch = out
                skip_chs.append(ch)
            if level != self.num_levels - 1:
                self.down.append(nn.ModuleDict({"down": Downsample(ch)}))
                skip_chs.append(ch)

        self.mid_res1 = ResBlock(ch, ch, temb_dim)
        self.mid_attn = CrossAttention(ch, context_dim, heads)
        self.mid_res2 = ResBlock(ch, ch, temb_dim)

        self.up = nn.ModuleList()
        for level, mult in reversed(list(enumerate(channel_mults))):
            out = base_width * mult
            for _ in range(num_res_blocks + 1):
                block = nn.ModuleDict({"res": ResBlock(ch + skip_chs.pop(), out, temb_dim)})
                if level in attn_levels:
                    block["attn"] = CrossAttention(out, context_dim, heads)
                self.up.append(block)
                ch = out
            if level != 0:
                self.up.append(nn.ModuleDict({"up": Upsample(ch)}))

        self.norm_out = nn.GroupNorm(GROUPS, ch)
        self.conv_out = nn.Conv2d(ch, out_channels, 3, padding=1)
        self.min_size = 2 ** (self.num_levels - 1)

    def cross_attention_layers(self) -> list[CrossAttention]:
        return [m for m in self.modules() if isinstance(m, CrossAttention)]

    def forward(self, x: torch.Tensor, t: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        """``x``: fused input ``B×C×H×W``; ``t``: 0-based steps ``(B,)``; ``ctx``: ``B×M×D``."""
        if x.shape[-1] % self.min_size or x.shape[-2] % self.min_size:
            raise DimensionError(f"spatial size {tuple(x.shape[-2:])} not divisible by {self.min_size}")
        if ctx.shape[-1] != self.context_dim:
            raise DimensionError(f"context dim {ctx.shape[-1]} != {self.context_dim}")
        # step 0 maps to embedding position 1 so that no step gets the all-zero sinusoid
        temb = self.time_mlp(timestep_embedding(t + 1, self.base_width).to(x.dtype))
        h = self.conv_in(x)
        hs = [h]
        for block in self.down:
            if "down" in block:
                h = block["down"](h)
            else:
                h = block["res"](h, temb)
                if "attn" in block:
                    h = block["attn"](h, ctx)
            hs.append(h)
        h = self.mid_res2(self.mid_attn(self.mid_res1(h, temb), ctx), temb)
        for block in self.up:
            if "up" in block:
                h = block["up"](h)
            else:
                h = block["res"](torch.cat([h, hs.pop()], dim=1), temb)
                if "attn" in block:
                    h = block["attn"](h, ctx)
        return self.conv_out(F.silu(self.norm_out(h)))
