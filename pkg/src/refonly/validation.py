"""Input validation helpers for the estimator layer."""
from __future__ import annotations

import numpy as np
import torch

from .errors import DimensionError, NonFiniteError


def check_images(X, channels: int | None = None, multiple_of: int = 1, name: str = "X") -> torch.Tensor:
    """Coerce ``X`` to a float32 ``N×C×H×W`` tensor with values in [0, 1].

    Accepts numpy arrays, tensors, or sequences of single images; a lone
    ``C×H×W`` image becomes a batch of one.
    """
    if isinstance(X, (list, tuple)):
        X = torch.stack([torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x) for x in X])
    t = torch.as_tensor(X if not isinstance(X, np.ndarray) else np.ascontiguousarray(X)).to(torch.float32)
    if t.dim() == 3:
        t = t[None]
    if t.dim() != 4:
        raise DimensionError(f"{name} must be C×H×W or N×C×H×W, got shape {tuple(t.shape)}")
    if channels is not None and t.shape[1] != channels:
        raise DimensionError(f"{name} must have {channels} channel(s), got {t.shape[1]}")
    if t.shape[-1] % multiple_of or t.shape[-2] % multiple_of:
        raise DimensionError(f"{name} spatial size {tuple(t.shape[-2:])} not divisible by {multiple_of}")
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    if t.numel() and (t.min() < 0 or t.max() > 1):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return t


def check_blueprints(X, name: str = "blueprints") -> torch.Tensor:
    t = check_images(X, channels=1, name=name)
    return (t > 0.5).to(torch.float32)
