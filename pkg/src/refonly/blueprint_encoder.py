"""Small convolutional encoder that turns a blueprint into a latent-sized feature map."""
from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError, DimensionError


class BlueprintEncoder(nn.Module):
    """Four ReLU conv layers followed by a zero-initialized 1x1 projection.

    The first ``log2(downsample)`` layers are 4x4 / stride 2 / pad 1 (each
    halves the resolution); the remaining layers are 3x3 / stride 1 / pad 1.
    With the default ``downsample=8`` a 512x512 blueprint becomes a 64x64 map.
    """

    def __init__(self, out_channels: int, downsample: int = 8, channels=(16, 32, 64, 128), in_channels: int = 1):
        super().__init__()
        if downsample < 1 or downsample & (downsample - 1):
            raise ConfigError(f"downsample must be a power of two, got {downsample}")
        n_strided = int(math.log2(downsample))
        if n_strided > len(channels):
            raise ConfigError(f"{len(channels)} layers cannot downsample by {downsample}")
        self.downsample = downsample
        self.in_channels = in_channels
        layers = []
        prev = in_channels
        for i, ch in enumerate(channels):
            if i < n_strided:
                layers.append(nn.Conv2d(prev, ch, 4, stride=2, padding=1))
            else:
                layers.append(nn.Conv2d(prev, ch, 3, stride=1, padding=1))
            layers.append(nn.ReLU())
            prev = ch
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(prev, out_channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, cb: torch.Tensor) -> torch.Tensor:
        h, w = cb.shape[-2:]
        if h % self.downsample or w % self.downsample:
            raise DimensionError(f"blueprint {h}x{w} not divisible by {self.downsample}")
        if cb.shape[-3] != self.in_channels:
            raise DimensionError(f"expected {self.in_channels} blueprint channel(s), got {cb.shape[-3]}")
        return self.proj(self.body(cb))


def encode_blueprint(cb: torch.Tensor, encoder: BlueprintEncoder) -> torch.Tensor:
    """Encode one ``1×H×W`` blueprint (or a batch of them)."""
    if cb.dim() == 3:
        return encoder(cb.unsqueeze(0))[0]
    return encoder(cb)


def fuse_blueprint(zt: torch.Tensor, cbp: torch.Tensor) -> torch.Tensor:
    if zt.shape != cbp.shape:
        raise DimensionError(f"cannot fuse {tuple(cbp.shape)} into {tuple(zt.shape)}")
    return zt + cbp
