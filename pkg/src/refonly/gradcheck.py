"""Finite-difference verification of the full model's gradients."""
from __future__ import annotations

import torch

from .data import extract_blueprint, generate_sprites
from .model import DualCondModel, ModelConfig
from .numerics import Rng, finite_difference_check
from .trainer import diffusion_loss

TINY = {
    "resolution": 8, "base_width": 8, "context_dim": 16, "patch": 4, "prompt_depth": 1,
    "prompt_heads": 2, "heads": 2, "T": 10,
}


def perturb_zero_init(model, rng: Rng, scale: float = 0.1) -> None:
    """Give zero-initialized tensors random values so every gradient path is exercised."""
    with torch.no_grad():
        for p in model.parameters():
            if p.requires_grad and not p.any():
                p.copy_(rng.normal(p.shape, p.dtype) * scale)


def model_gradient_check(config: ModelConfig | dict | None = None, seed: int = 0, h: float = 1e-4,
                         per_tensor: int | None = 3, batch: int = 2, stats: dict | None = None) -> dict[str, float]:
    """Max relative error per parameter tensor of the diffusion loss, in float64.

    ReLU kinks inside the +/-h window are detected and resampled. Uses
    generated sprites at the model resolution; the last batch item gets the
    null context so that parameter is covered too.
    """
    if config is None or isinstance(config, dict):
        config = ModelConfig(**{**TINY, **(config or {})})
    rng = Rng(seed)
    model = DualCondModel(config, seed=seed).double()
    perturb_zero_init(model, rng.spawn(1))
    sprites = generate_sprites(batch, 2, config.resolution, rng.spawn(2))
    prompts = torch.stack([sprites[2 * i].image for i in range(batch)]).double()
    targets = torch.stack([sprites[2 * i + 1].image for i in range(batch)]).double()
    bps = torch.stack([extract_blueprint(sprites[2 * i + 1].image) for i in range(batch)]).double()
    r = rng.spawn(3)
    t = torch.from_numpy(r.integers(0, config.T, batch))
    eps = r.normal((batch, config.z_channels, config.z_size, config.z_size), torch.float64)
    drop = torch.zeros(batch, dtype=torch.bool)
    drop[-1] = True
    params = model.trainable_parameters()
    return finite_difference_check(
        lambda: diffusion_loss(model, (prompts, targets, bps), t, eps, drop=drop),
        params, h=h, per_tensor=per_tensor, rng=rng.spawn(4),
        kink_modules=[m for m in model.modules() if isinstance(m, torch.nn.ReLU)], stats=stats)
