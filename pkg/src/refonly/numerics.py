"""Numeric kernel: seeded randomness, checked primitives and gradients.

Tensors are ``torch.Tensor`` (row-major, float32 by default). Gradients come
from torch's reverse-mode autodiff; :func:`finite_difference_check` is the
independent oracle used to validate them in float64.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError, NonFiniteError

DEFAULT_DTYPE = torch.float32


class Rng:
    """Seeded generator; the only entropy source in the package.

    Uniform draws come from numpy's PCG64 bit generator, whose stream is
    specified and platform-independent. Normals use Box-Muller on top of those
    uniforms so that the Gaussian stream does not depend on numpy's ziggurat.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, *keys: int) -> "Rng":
        """Child generator keyed by ``(seed, *keys)``; does not advance ``self``."""
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape, dtype=np.float64)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal_np(self, shape=()) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1], keeps the log finite
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * math.pi * u2), r * np.sin(2 * math.pi * u2)])[:n]
        return z.reshape(shape)

    def normal(self, shape, dtype=DEFAULT_DTYPE) -> torch.Tensor:
        return torch.from_numpy(np.asarray(self.normal_np(tuple(shape)))).to(dtype)


def check_finite(x: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return check_finite(a @ b, "matmul")


def conv2d(x: torch.Tensor, w: torch.Tensor, bias=None, stride: int = 1, pad: int = 0) -> torch.Tensor:
    """Zero-padded cross-correlation; accepts ``C×H×W`` or batched input."""
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    unbatched = x.dim() == 3
    xb = x.unsqueeze(0) if unbatched else x
    if xb.dim() != 4 or w.dim() != 4 or xb.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d got input {tuple(x.shape)} and kernel {tuple(w.shape)}")
    k_h, k_w = w.shape[-2:]
    if xb.shape[-2] + 2 * pad < k_h or xb.shape[-1] + 2 * pad < k_w:
        raise DimensionError("kernel larger than padded input")
    out = F.conv2d(xb, w, bias, stride=stride, padding=pad)
    return check_finite(out[0] if unbatched else out, "conv2d")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise DimensionError(f"axis {axis} invalid for {x.dim()}-d tensor")
    shifted = x - x.amax(dim=axis, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def grad(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Exact gradients of the scalar ``loss_fn()`` w.r.t. every named parameter."""
    loss = loss_fn()
    if loss.numel() != 1:
        raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, tensors)}
    gs = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, tensors, gs)}


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps round-off on ~0 gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


class _KinkProbe:
    """Records the sign pattern of inputs to piecewise-linear activations."""

    def __init__(self, modules):
        self.patterns: list[torch.Tensor] = []
        self.handles = [m.register_forward_hook(self._hook) for m in modules]

    def _hook(self, module, inputs, output):
        self.patterns.append(inputs[0].detach() > 0)

    def take(self) -> list[torch.Tensor]:
        out, self.patterns = self.patterns, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def _same(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-4,
    per_tensor: int | None = 4,
    rng: Rng | None = None,
    floor: float = 1e-6,
    kink_modules=(),
    stats: dict | None = None,
) -> dict[str, float]:
    """Compare autograd against central differences, per named parameter.

    Perturbs ``per_tensor`` randomly chosen entries of each parameter in place
    (all entries when ``None``) and returns the max relative error per name.
    Expects float64 parameters. If ``kink_modules`` are given (e.g. ReLUs),
    an entry whose +/-h evaluations flip any of their input signs straddles a
    non-differentiable point; it is skipped and another entry is drawn.
    """
    rng = rng or Rng(0)
    analytic = grad(loss_fn, params)
    probe = _KinkProbe(kink_modules) if kink_modules else None
    worst: dict[str, float] = {}
    skipped = 0
    try:
        with torch.no_grad():
            for name, p in params.items():
                flat = p.view(-1)
                if per_tensor is None or per_tensor >= flat.numel():
                    order, want = list(range(flat.numel())), flat.numel()
                else:
                    order, want = rng.permutation(flat.numel()).tolist(), per_tensor
                g = analytic[name].reshape(-1)
                err, done = 0.0, 0
                for i in order:
                    if done == want:
                        break
                    orig = flat[i].item()
                    flat[i] = orig + h
                    up = loss_fn().item()
                    sig_up = probe.take() if probe else None
                    flat[i] = orig - h
                    down = loss_fn().item()
                    sig_down = probe.take() if probe else None
                    flat[i] = orig
                    if probe and not _same(sig_up, sig_down):
                        skipped += 1
                        continue
                    err = max(err, relative_error(g[i].item(), (up - down) / (2 * h), floor))
                    done += 1
                worst[name] = err
    finally:
        if probe:
            probe.close()
    if stats is not None:
        stats["skipped_kinks"] = skipped
    return worst
