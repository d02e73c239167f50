"""Joint training of the prompt encoder, blueprint encoder and UNet."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import save_model
from .data import TrainingPair
from .errors import ConfigError, ContractError, NonFiniteError
from .numerics import Rng, grad
from .schedule import q_sample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_target: float = 1e-4
    warmup_steps: int = 500
    total_steps: int = 15000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    cond_dropout_p: float = 0.1
    seed: int = 0
    resolution: int = 32
    latent_mode: bool = False
    checkpoint_every: int = 1000
    warmup_kind: str = "linear"

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 1 or self.lr_target <= 0:
            raise ConfigError("batch_size, total_steps and lr_target must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0 and self.weight_decay >= 0):
            raise ConfigError("invalid AdamW hyper-parameters")
        if not 0 <= self.cond_dropout_p < 1:
            raise ConfigError("cond_dropout_p must be in [0, 1)")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to ``lr_target`` over ``warmup_steps``, then constant."""
    if step < 0:
        raise ContractError("step must be >= 0")
    if cfg.warmup_steps == 0 or step >= cfg.warmup_steps:
        return cfg.lr_target
    return cfg.lr_target * step / cfg.warmup_steps


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: OptimizerState,
               cfg: TrainConfig, lr_t: float):
    """One in-place AdamW update with decoupled weight decay.

    ``theta -= lr_t * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``
    """
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ContractError(f"optimizer state shape mismatch for {name}")
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        update = (m / c1) / ((v / c2).sqrt() + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p
        p.sub_(lr_t * update)
    return params, state


def stack_pairs(pairs: Sequence[TrainingPair]):
    return (torch.stack([p.prompt for p in pairs]), torch.stack([p.target for p in pairs]),
            torch.stack([p.blueprint for p in pairs]))


def diffusion_loss(model, batch, t, eps: torch.Tensor, rng: Rng | None = None,
                   cond_dropout_p: float = 0.0, drop: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between ``eps`` and the model's estimate at ``q_sample(z0, t, eps)``.

    ``batch`` is a :class:`TrainingPair` or a ``(prompts, targets, blueprints)``
    tuple of batched tensors. Items flagged in ``drop`` (or drawn from ``rng``
    with probability ``cond_dropout_p``) see the learned null context instead
    of their prompt.
    """
    if isinstance(batch, TrainingPair):
        batch = (batch.prompt[None], batch.target[None], batch.blueprint[None])
    prompts, targets, blueprints = batch
    b = targets.shape[0]
    with torch.no_grad():
        z0 = model.to_latent(targets)
    if eps.dim() == z0.dim() - 1:
        eps = eps[None]
    tt = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(b)
    zt = q_sample(z0, tt, eps.to(z0.dtype), model.schedule)
    ctx = model.encode_prompt(prompts)
    if drop is None and rng is not None and cond_dropout_p > 0:
        drop = torch.from_numpy(rng.uniform(b) < cond_dropout_p)
    if drop is not None and bool(drop.any()):
        ctx = torch.where(drop.view(-1, 1, 1), model.null_context.expand_as(ctx), ctx)
    eps_hat = model.predict_eps(zt, tt, ctx, model.encode_blueprint(blueprints))
    return ((eps - eps_hat) ** 2).mean()


class TrainingDiverged(NonFiniteError):
    def __init__(self, step: int, indices):
        super().__init__(f"non-finite loss at step {step} (batch indices {list(indices)})")
        self.step = step
        self.indices = list(indices)


@dataclass
class StepDraws:
    indices: np.ndarray
    t: torch.Tensor
    eps: torch.Tensor
    drop: torch.Tensor


def draw_step(step: int, n: int, model, cfg: TrainConfig) -> StepDraws:
    """All randomness of update ``step`` (0-based), derived from ``(seed, step)`` alone."""
    root = Rng(cfg.seed)
    per_epoch = max(1, n // cfg.batch_size)
    epoch, slot = divmod(step, per_epoch)
    order = root.spawn(0, epoch).permutation(n)
    if n >= cfg.batch_size:
        idx = order[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
    else:
        idx = order[np.arange(cfg.batch_size) % n]
    r = root.spawn(1, step)
    c, s = model.config.z_channels, model.config.z_size
    t = torch.from_numpy(r.integers(0, model.schedule.T, cfg.batch_size))
    eps = r.normal((cfg.batch_size, c, s, s))
    drop = torch.from_numpy(r.uniform(cfg.batch_size) < cfg.cond_dropout_p)
    return StepDraws(idx, t, eps, drop)


@dataclass
class TrainResult:
    model: object
    state: OptimizerState
    losses: list[float]
    checkpoint: Path | None = None


def train(model, dataset: Sequence[TrainingPair], cfg: TrainConfig, out_dir=None,
          state: OptimizerState | None = None, steps: int | None = None) -> TrainResult:
    """Run AdamW updates on every trainable parameter; the autoencoder stays frozen.

    Deterministic given ``cfg.seed``. Resuming with a previous ``state``
    continues from ``state.step``. With ``out_dir`` a ``metrics.csv``
    (``step,loss,lr``) is appended per step and checkpoints are written every
    ``cfg.checkpoint_every`` steps plus ``final.ckpt`` at the end.
    """
    if not dataset:
        raise ContractError("dataset is empty")
    if cfg.resolution != model.config.resolution or cfg.latent_mode != model.config.latent_mode:
        raise ConfigError("train config resolution/latent_mode disagree with the model")
    state = state or OptimizerState()
    params = model.trainable_parameters()
    end = cfg.total_steps if steps is None else min(cfg.total_steps, state.step + steps)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        new = not (out / "metrics.csv").exists() or state.step == 0
        fh = open(out / "metrics.csv", "w" if new else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(["step", "loss", "lr"])
    losses = []
    model.train()
    try:
        while state.step < end:
            step = state.step
            d = draw_step(step, len(dataset), model, cfg)
            batch = stack_pairs([dataset[i] for i in d.indices])
            try:
                g = grad(lambda: _loss_holder(model, batch, d, losses), params)
            except NonFiniteError as exc:
                raise TrainingDiverged(step, d.indices) from exc
            loss = losses[-1]
            if not math.isfinite(loss):
                raise TrainingDiverged(step, d.indices)
            lr = lr_at(step + 1, cfg)
            adamw_step(params, g, state, cfg, lr)
            if writer is not None:
                writer.writerow([state.step, repr(loss), repr(lr)])
            if state.step % 100 == 0 or state.step == end:
                log.info("step %d loss %.5f lr %.3g", state.step, loss, lr)
                if fh is not None:
                    fh.flush()
            if out is not None and state.step % cfg.checkpoint_every == 0:
                save_model(out / f"step_{state.step:07d}.ckpt", model, cfg, state)
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    ckpt = None
    if out is not None:
        ckpt = out / "final.ckpt"
        save_model(ckpt, model, cfg, state)
    return TrainResult(model, state, losses, ckpt)


def _loss_holder(model, batch, d: StepDraws, sink: list) -> torch.Tensor:
    loss = diffusion_loss(model, batch, d.t, d.eps, drop=d.drop)
    sink.append(float(loss.detach()))
    return loss


def train_autoencoder(ae, images: torch.Tensor, steps: int = 3000, batch_size: int = 32, lr: float = 1e-3,
                      seed: int = 0, kl_weight: float = 0.0, warmup_steps: int = 100) -> list[float]:
    """Fit the autoencoder by L2 reconstruction, then set ``latent_scale`` to unit latent std."""
    cfg = TrainConfig(batch_size=batch_size, lr_target=lr, warmup_steps=min(warmup_steps, steps),
                      total_steps=steps, weight_decay=0.0, cond_dropout_p=0.0, seed=seed)
    params = {n: p for n, p in ae.named_parameters()}
    ae.requires_grad_(True)
    state = OptimizerState()
    root = Rng(seed)
    losses = []
    n = images.shape[0]
    ae.train()
    for step in range(steps):
        idx = root.spawn(step).integers(0, n, batch_size)
        x = images[torch.from_numpy(idx)]
        holder = []

        def fn():
            loss = ae.loss(x, kl_weight)
            holder.append(float(loss.detach()))
            return loss

        g = grad(fn, params)
        if not math.isfinite(holder[0]):
            raise TrainingDiverged(step, idx)
        adamw_step(params, g, state, cfg, lr_at(step + 1, cfg))
        losses.append(holder[0])
        if (step + 1) % 500 == 0:
            log.info("ae step %d loss %.5f", step + 1, holder[0])
    ae.eval()
    ae.requires_grad_(False)
    with torch.no_grad():
        z = torch.cat([ae.moments(images[i:i + 256])[0] for i in range(0, n, 256)])
        ae.latent_scale.fill_(1.0 / float(z.std()))
    return losses
