"""Reverse diffusion: ancestral DDPM and DDIM steps, and the two-condition pipeline."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DimensionError
from .numerics import Rng
from .schedule import NoiseSchedule, posterior_mean_var


@dataclass
class SampleConfig:
    steps: int = 20
    method: str = "ddim"
    eta: float = 0.0
    guidance_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("ddpm", "ddim"):
            raise ConfigError(f"method must be 'ddpm' or 'ddim', got {self.method!r}")
        if self.steps < 1 or self.eta < 0 or self.guidance_scale < 1:
            raise ConfigError("need steps >= 1, eta >= 0, guidance_scale >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def timesteps_for(cfg: SampleConfig, T: int) -> list[int]:
    """Descending step indices; DDPM walks every step, DDIM an even subsequence ending at T-1."""
    if cfg.steps > T:
        raise ConfigError(f"{cfg.steps} sampling steps exceed the schedule's {T}")
    if cfg.method == "ddpm":
        return list(range(T - 1, -1, -1))
    if cfg.steps == 1:
        return [T - 1]
    return [int(v) for v in np.round(np.linspace(0, T - 1, cfg.steps))[::-1]]


def predict_x0(zt, t: int, eps_hat, s: NoiseSchedule, clip: bool = False):
    ab = s.alpha_bar(t)
    x0 = (zt - math.sqrt(1 - ab) * eps_hat) / math.sqrt(ab)
    return x0.clamp(-1, 1) if clip else x0


def _noise_like(z: torch.Tensor, rng) -> torch.Tensor:
    if isinstance(rng, (list, tuple)):
        return torch.stack([r.normal(z.shape[1:], z.dtype) for r in rng])
    return rng.normal(z.shape, z.dtype)


def ddpm_step(zt, t: int, eps_hat, s: NoiseSchedule, rng, clip: bool = False):
    """Sample ``z_{t-1}`` from the posterior around the predicted clean latent.

    At ``t == 0`` this returns the predicted clean latent itself (the
    posterior mean when the previous alpha-bar is 1) with no noise.
    ``rng`` is an :class:`Rng` or a list with one per batch item.
    """
    if not 0 <= t < s.T:
        raise IndexError(f"timestep {t} outside [0, {s.T})")
    x0 = predict_x0(zt, t, eps_hat, s, clip)
    if t == 0:
        return x0
    mean, var = posterior_mean_var(x0, zt, t, s)
    return mean + math.sqrt(var) * _noise_like(zt, rng)


def ddim_step(zt, t: int, t_prev: int, eps_hat, s: NoiseSchedule, eta: float = 0.0, rng=None,
              clip: bool = False):
    """Jump from step ``t`` to ``t_prev`` (``-1`` means the clean latent).

    ``eta=0`` is deterministic; ``eta=1`` over consecutive steps has the DDPM
    posterior's mean and variance.
    """
    if t_prev >= t:
        raise ContractError(f"t_prev ({t_prev}) must be below t ({t})")
    if not 0 <= t < s.T or t_prev < -1:
        raise IndexError("timestep outside schedule range")
    ab, ab_prev = s.alpha_bar(t), s.alpha_bar(t_prev)
    x0 = predict_x0(zt, t, eps_hat, s, clip)
    if clip:
        eps_hat = (zt - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
    sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
    out = math.sqrt(ab_prev) * x0 + math.sqrt(max(1 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0:
        if rng is None:
            raise ContractError("a stochastic DDIM step (eta > 0) needs an rng")
        out = out + sigma * _noise_like(zt, rng)
    return out


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


@torch.no_grad()
def sample_batch(model, prompts: torch.Tensor, blueprints: torch.Tensor, cfg: SampleConfig,
                 seeds: Sequence[int] | None = None) -> torch.Tensor:
    """Generate ``B`` images; item ``i`` draws all its noise from ``Rng(seeds[i])``.

    Both condition encoders run exactly once per call.
    """
    mc = model.config
    if blueprints.shape[-2:] != (mc.resolution, mc.resolution):
        raise DimensionError(f"blueprint {tuple(blueprints.shape[-2:])} does not match model "
                             f"resolution {mc.resolution}")
    b = blueprints.shape[0]
    if prompts.shape[0] != b:
        raise DimensionError("prompt and blueprint batch sizes differ")
    seeds = [cfg.seed + i for i in range(b)] if seeds is None else list(seeds)
    rngs = [Rng(s) for s in seeds]
    was_training = model.training
    model.eval()
    s = model.schedule
    ctx = model.encode_prompt(_resize(prompts, mc.resolution))
    cbp = model.encode_blueprint(blueprints)
    guided = cfg.guidance_scale != 1.0
    if guided:
        ctx = torch.cat([ctx, model.null_context.expand_as(ctx)])
        cbp2 = torch.cat([cbp, cbp])
    z = torch.stack([r.normal((mc.z_channels, mc.z_size, mc.z_size)) for r in rngs])
    clip = not mc.latent_mode
    steps = timesteps_for(cfg, s.T)
    for k, t in enumerate(steps):
        if guided:
            e_cond, e_null = model.predict_eps(torch.cat([z, z]), t, ctx, cbp2).chunk(2)
            eps_hat = e_null + cfg.guidance_scale * (e_cond - e_null)
        else:
            eps_hat = model.predict_eps(z, t, ctx, cbp)
        if cfg.method == "ddpm":
            z = ddpm_step(z, t, eps_hat, s, rngs, clip)
        else:
            t_prev = steps[k + 1] if k + 1 < len(steps) else -1
            z = ddim_step(z, t, t_prev, eps_hat, s, cfg.eta, rngs, clip)
    model.train(was_training)
    return model.from_latent(z)


def generate(model, prompt_image: torch.Tensor, blueprint: torch.Tensor, cfg: SampleConfig) -> torch.Tensor:
    """One ``3×H×W`` image from a prompt image and a ``1×H×W`` blueprint."""
    return sample_batch(model, prompt_image[None], blueprint[None], cfg, [cfg.seed])[0]


def write_sidecar(png_path, cfg: SampleConfig, checkpoint_hash: str | None, **extra) -> Path:
    path = Path(png_path).with_suffix(".json")
    record = {"sample_config": cfg.to_dict(), "seed": cfg.seed, "checkpoint_sha256": checkpoint_hash, **extra}
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
