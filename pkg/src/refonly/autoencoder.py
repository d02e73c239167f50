"""Optional convolutional autoencoder for latent-space diffusion."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError


class Autoencoder(nn.Module):
    """8x spatial compression to ``latent_channels`` channels and back.

    With ``kl=True`` the encoder emits a mean and log-variance and
    :meth:`encode` returns the mean. ``latent_scale`` is set after training so
    that encoded latents have roughly unit variance.
    """

    def __init__(self, latent_channels: int = 4, widths=(32, 64, 64), in_channels: int = 3, kl: bool = False):
        super().__init__()
        self.latent_channels = latent_channels
        self.kl = kl
        enc = [nn.Conv2d(in_channels, widths[0], 3, padding=1), nn.SiLU()]
        prev = widths[0]
        for w in widths:
            enc += [nn.Conv2d(prev, w, 4, stride=2, padding=1), nn.SiLU()]
            prev = w
        enc.append(nn.Conv2d(prev, latent_channels * (2 if kl else 1), 1))
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(latent_channels, prev, 1), nn.SiLU()]
        for w in reversed(widths):
            dec += [nn.ConvTranspose2d(prev, w, 4, stride=2, padding=1), nn.SiLU()]
            prev = w
        dec.append(nn.Conv2d(prev, in_channels, 3, padding=1))
        self.decoder = nn.Sequential(*dec)
        self.factor = 2 ** len(widths)
        self.register_buffer("latent_scale", torch.ones(()))

    def moments(self, x: torch.Tensor):
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise DimensionError(f"image {tuple(x.shape[-2:])} not divisible by {self.factor}")
        h = self.encoder(x * 2 - 1)
        if self.kl:
            mean, logvar = h.chunk(2, dim=1)
            return mean, logvar.clamp(-30, 20)
        return h, None

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        return (self.decoder(z) + 1) / 2

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.moments(x)[0] * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-3] != self.latent_channels:
            raise DimensionError(f"latent has {z.shape[-3]} channels, expected {self.latent_channels}")
        return self.decode_raw(z / self.latent_scale).clamp(0, 1)

    def loss(self, x: torch.Tensor, kl_weight: float = 0.0) -> torch.Tensor:
        mean, logvar = self.moments(x)
        loss = F.mse_loss(self.decode_raw(mean), x)
        if self.kl and kl_weight > 0:
            loss = loss + kl_weight * 0.5 * (mean.pow(2) + logvar.exp() - 1 - logvar).mean()
        return loss


def encode_image(x: torch.Tensor, ae: Autoencoder) -> torch.Tensor:
    return ae.encode(x.unsqueeze(0))[0] if x.dim() == 3 else ae.encode(x)


def decode_latent(z: torch.Tensor, ae: Autoencoder) -> torch.Tensor:
    return ae.decode(z.unsqueeze(0))[0] if z.dim() == 3 else ae.decode(z)
