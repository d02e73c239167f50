"""Assembly of the blueprint encoder, prompt encoder, UNet and optional autoencoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import torch
from torch import nn

from .autoencoder import Autoencoder
from .blueprint_encoder import BlueprintEncoder, fuse_blueprint
from .errors import ConfigError, DimensionError
from .numerics import Rng, check_finite
from .prompt_encoder import PromptEncoder
from .schedule import NoiseSchedule, make_linear_schedule, scaled_linear_bounds
from .unet import UNet


@dataclass
class ModelConfig:
    resolution: int = 32
    latent_mode: bool = False
    latent_channels: int = 4
    base_width: int = 32
    channel_mults: tuple = (1, 2)
    num_res_blocks: int = 2
    attn_levels: tuple = (1,)
    heads: int = 4
    patch: int = 8
    context_dim: int = 128
    prompt_depth: int = 4
    prompt_heads: int = 4
    blueprint_channels: tuple = (16, 32, 64, 128)
    fusion: str = "add"
    ae_widths: tuple = (32, 64, 64)
    ae_kl: bool = False
    T: int = 200
    # None: scale the 1000-step bounds [1e-4, 0.02] to T (resolved on construction)
    beta_start: float | None = None
    beta_end: float | None = None

    def __post_init__(self):
        for f in ("channel_mults", "attn_levels", "blueprint_channels", "ae_widths"):
            setattr(self, f, tuple(getattr(self, f)))
        if self.fusion not in ("add", "concat"):
            raise ConfigError(f"fusion must be 'add' or 'concat', got {self.fusion!r}")
        if self.resolution % 8:
            raise ConfigError("resolution must be divisible by 8")
        if self.beta_start is None or self.beta_end is None:
            start, end = scaled_linear_bounds(self.T)
            self.beta_start = start if self.beta_start is None else self.beta_start
            self.beta_end = end if self.beta_end is None else self.beta_end

    @property
    def z_channels(self) -> int:
        return self.latent_channels if self.latent_mode else 3

    @property
    def z_size(self) -> int:
        return self.resolution // 8 if self.latent_mode else self.resolution

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class DualCondModel(nn.Module):
    """Blueprint-on-queries, prompt-on-keys/values denoiser.

    Diffusion runs on ``z``: pixels rescaled to [-1, 1] in pixel mode, or
    autoencoder latents in latent mode. The blueprint encoder always maps the
    image-resolution blueprint onto ``z``'s spatial grid.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.seed = seed
        # torch's initializers draw from its global generator; pin it to ``seed``
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(Rng(seed).spawn(0xC0FFEE).seed % 2**63)
            self._build(config)

    def _build(self, config: ModelConfig):
        c = config.z_channels
        self.blueprint_encoder = BlueprintEncoder(
            c, downsample=config.resolution // config.z_size, channels=config.blueprint_channels)
        self.prompt_encoder = PromptEncoder(
            config.resolution, config.patch, config.context_dim, config.prompt_depth, config.prompt_heads)
        self.unet = UNet(
            c * (2 if config.fusion == "concat" else 1), c, config.context_dim, config.base_width,
            config.channel_mults, config.num_res_blocks, config.attn_levels, config.heads)
        self.null_context = nn.Parameter(torch.zeros(self.prompt_encoder.num_tokens, config.context_dim))
        self.autoencoder = Autoencoder(config.latent_channels, config.ae_widths, kl=config.ae_kl) \
            if config.latent_mode else None
        if self.autoencoder is not None:
            self.autoencoder.requires_grad_(False)
        self.schedule: NoiseSchedule = make_linear_schedule(config.T, config.beta_start, config.beta_end)

    # parameters trained by the diffusion loss (the autoencoder is frozen)
    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if not n.startswith("autoencoder.")}

    def to_latent(self, x: torch.Tensor) -> torch.Tensor:
        """Images in [0, 1] to diffusion space."""
        if self.autoencoder is None:
            return x * 2 - 1
        return self.autoencoder.encode(x)

    def from_latent(self, z: torch.Tensor) -> torch.Tensor:
        if self.autoencoder is None:
            return ((z + 1) / 2).clamp(0, 1)
        return self.autoencoder.decode(z)

    def encode_prompt(self, cp: torch.Tensor) -> torch.Tensor:
        return self.prompt_encoder(cp)

    def encode_blueprint(self, cb: torch.Tensor) -> torch.Tensor:
        if cb.shape[-1] != self.config.resolution or cb.shape[-2] != self.config.resolution:
            raise DimensionError(f"blueprint {tuple(cb.shape[-2:])} does not match model resolution "
                                 f"{self.config.resolution}")
        return self.blueprint_encoder(cb)

    def predict_eps(self, zt: torch.Tensor, t, ctx: torch.Tensor, cbp: torch.Tensor) -> torch.Tensor:
        """Noise estimate for batched ``zt`` at steps ``t`` (int or ``(B,)`` tensor)."""
        if zt.shape != cbp.shape:
            raise DimensionError(f"latent {tuple(zt.shape)} and blueprint features {tuple(cbp.shape)} differ")
        tt = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(zt.shape[0])
        if int(tt.min()) < 0 or int(tt.max()) >= self.schedule.T:
            raise IndexError(f"timestep outside [0, {self.schedule.T})")
        if self.config.fusion == "add":
            x = fuse_blueprint(zt, cbp)
        else:
            x = torch.cat([zt, cbp], dim=1)
        return check_finite(self.unet(x, tt, ctx), "predict_eps")

    def forward(self, zt, t, cp, cb):
        return self.predict_eps(zt, t, self.encode_prompt(cp), self.encode_blueprint(cb))


def predict_eps(zt, t, ctx, cbp, model: DualCondModel) -> torch.Tensor:
    """Single-sample convenience wrapper: ``zt`` is ``C×h×w``, ``ctx`` is ``M×D``."""
    if zt.dim() == 3:
        return model.predict_eps(zt[None], t, ctx[None], cbp[None])[0]
    return model.predict_eps(zt, t, ctx, cbp)
