"""Vision-transformer image encoder producing the cross-attention context."""
from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError, DimensionError
from .numerics import softmax


def multihead_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d)) v`` per head, on ``(..., N, C)`` token tensors."""
    *lead, n, c = q.shape
    m = k.shape[-2]
    d = c // heads
    qh = q.reshape(*lead, n, heads, d).transpose(-3, -2)
    kh = k.reshape(*lead, m, heads, d).transpose(-3, -2)
    vh = v.reshape(*lead, m, heads, d).transpose(-3, -2)
    weights = softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d), axis=-1)
    return (weights @ vh).transpose(-3, -2).reshape(*lead, n, c)


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        x = x + self.attn_out(multihead_attention(q, k, v, self.heads))
        return x + self.mlp(self.norm2(x))


class PromptEncoder(nn.Module):
    """Patchify, add class token and learned positions, run ``depth`` blocks, layer-norm.

    Images are expected in [0, 1]. The output keeps every token, so the
    context has ``(H/patch)*(W/patch) + 1`` rows.
    """

    def __init__(self, image_size: int = 32, patch: int = 8, dim: int = 128, depth: int = 4, heads: int = 4,
                 in_channels: int = 3):
        super().__init__()
        if image_size % patch:
            raise ConfigError(f"image size {image_size} not divisible by patch {patch}")
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.patch = patch
        self.dim = dim
        self.image_size = image_size
        self.num_tokens = (image_size // patch) ** 2 + 1
        self.patch_embed = nn.Conv2d(in_channels, dim, patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.randn(1, self.num_tokens, dim) * 0.02)
        self.blocks = nn.ModuleList(SelfAttentionBlock(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, cp: torch.Tensor) -> torch.Tensor:
        h, w = cp.shape[-2:]
        if h % self.patch or w % self.patch:
            raise DimensionError(f"prompt {h}x{w} not divisible by patch {self.patch}")
        if (h // self.patch) * (w // self.patch) + 1 != self.num_tokens:
            raise DimensionError(f"prompt {h}x{w} does not match the {self.image_size}px position table")
        x = self.patch_embed(cp * 2 - 1).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


def encode_prompt(cp: torch.Tensor, encoder: PromptEncoder) -> torch.Tensor:
    """Context tokens ``M×dim`` for one ``3×H×W`` prompt (or ``B×M×dim`` for a batch)."""
    if cp.dim() == 3:
        return encoder(cp.unsqueeze(0))[0]
    return encoder(cp)


def self_attention_block(x: torch.Tensor, block: SelfAttentionBlock) -> torch.Tensor:
    return block(x)
