"""Forward diffusion process and its closed-form Gaussian posterior.

Timesteps are 0-indexed: ``t`` runs over ``0..T-1`` and ``alpha_bars[t]`` is
the cumulative product through step ``t``. Coming out of step 0 lands on the
data itself, so the "previous" alpha-bar of step 0 is 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ConfigError("betas must be a non-empty 1-d sequence")
        if not np.all((b > 0) & (b < 1)):
            raise ConfigError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", b)
        b.setflags(write=False)

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        """``alpha_bars[t]``, with ``alpha_bar(-1) == 1``."""
        if not -1 <= t < self.T:
            raise IndexError(f"timestep {t} outside [-1, {self.T})")
        return 1.0 if t < 0 else float(self.alpha_bars[t])

    def to_dict(self) -> dict:
        return {"kind": "explicit", "betas": self.betas.tolist()}


@dataclass(frozen=True)
class LinearSchedule(NoiseSchedule):
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def to_dict(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return LinearSchedule(betas, float(beta_start), float(beta_end))


def scaled_linear_bounds(T: int, reference_T: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> tuple[float, float]:
    """Linear bounds for a ``T``-step chain with the same end-point noise as ``reference_T`` steps.

    Both bounds scale by ``reference_T / T`` (``beta_end`` capped below 1).
    Reusing the 1000-step bounds for a short chain leaves signal at the last
    step (``ab_199 ~ 0.13`` for ``T=200``), which a sampler starting from pure
    noise cannot match.
    """
    scale = reference_T / T
    return min(beta_start * scale, 0.5), min(beta_end * scale, 0.999)


def schedule_from_dict(d: dict) -> NoiseSchedule:
    if d["kind"] == "linear":
        return make_linear_schedule(d["T"], d["beta_start"], d["beta_end"])
    return NoiseSchedule(np.asarray(d["betas"], dtype=np.float64))


def _check_t(t: int, s: NoiseSchedule):
    if not 0 <= t < s.T:
        raise IndexError(f"timestep {t} outside [0, {s.T})")


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Noise ``z0`` to step ``t``: ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``t`` may be an int or a 1-d integer tensor holding one step per batch item.
    """
    if eps.shape != z0.shape:
        raise DimensionError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    if isinstance(t, torch.Tensor) and t.dim() == 1:
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= s.T):
            raise IndexError("timestep outside schedule range")
        ab = torch.as_tensor(s.alpha_bars, dtype=z0.dtype)[t].view(-1, *([1] * (z0.dim() - 1)))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    t = int(t)
    _check_t(t, s)
    ab = s.alpha_bar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def posterior_coefficients(t: int, s: NoiseSchedule) -> tuple[float, float, float]:
    """``(c0, ct, var)`` with ``mean = c0 * z0 + ct * zt`` for ``q(z_{t-1} | z_t, z0)``."""
    ab_t = s.alpha_bar(t)
    ab_prev = s.alpha_bar(t - 1)
    beta_t = float(s.betas[t])
    c0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = np.sqrt(1.0 - beta_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    return float(c0), float(ct), float(var)


def posterior_mean_var(z0: torch.Tensor, zt: torch.Tensor, t: int, s: NoiseSchedule):
    """Mean and variance of ``q(z_{t-1} | z_t, z0)`` for ``t >= 1``."""
    if t == 0:
        raise ContractError("step 0 has no previous latent; its posterior is the data itself")
    _check_t(t, s)
    if z0.shape != zt.shape:
        raise DimensionError("z0 and zt shapes differ")
    c0, ct, var = posterior_coefficients(t, s)
    return c0 * z0 + ct * zt, var
