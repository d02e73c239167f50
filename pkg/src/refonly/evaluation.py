"""Structure and colour fidelity metrics, and the shuffled-condition control experiment."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .data import DEFAULT_C, DEFAULT_WINDOW, TrainingPair, extract_blueprint, save_png
from .errors import ConfigError, DimensionError, EmptyImageError
from .sampler import SampleConfig, sample_batch

COLOR_BINS = 32


def _mask(x) -> np.ndarray:
    a = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    return (a.reshape(a.shape[-2:]) > 0.5)


def mask_iou(a, b, dilate: int = 1) -> float:
    """IoU of two binary masks after growing each by ``dilate`` pixels (8-connected)."""
    ma, mb = _mask(a), _mask(b)
    if ma.shape != mb.shape:
        raise DimensionError(f"mask shapes {ma.shape} and {mb.shape} differ")
    if dilate:
        st = np.ones((3, 3), dtype=bool)
        ma = ndimage.binary_dilation(ma, st, iterations=dilate)
        mb = ndimage.binary_dilation(mb, st, iterations=dilate)
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ma, mb).sum() / union)


def edge_iou(output, blueprint, window: int = DEFAULT_WINDOW, C: float = DEFAULT_C) -> float:
    if output.shape[-2:] != blueprint.shape[-2:]:
        raise DimensionError("output and blueprint resolutions differ")
    return mask_iou(extract_blueprint(output, window, C), blueprint, dilate=1)


def _histograms(image, mask) -> np.ndarray:
    img = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    m = _mask(mask)
    if not m.any():
        raise EmptyImageError("colour mask is empty")
    out = []
    for ch in img:
        idx = np.minimum((np.clip(ch[m], 0, 1) * COLOR_BINS).astype(int), COLOR_BINS - 1)
        out.append(np.bincount(idx, minlength=COLOR_BINS) / m.sum())
    return np.stack(out)


def color_distance(output, prompt, out_mask, prompt_mask) -> float:
    """Mean over RGB of the L1 distance between 32-bin masked histograms (range [0, 2])."""
    return float(np.abs(_histograms(output, out_mask) - _histograms(prompt, prompt_mask)).sum(axis=1).mean())


@dataclass
class EvalReport:
    edge_iou: float
    edge_iou_shuffled: float
    color_emd: float
    color_emd_shuffled: float
    control_gap: float
    prompt_gap: float
    color_win_rate: float
    n_samples: int
    per_pair: list

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _derangement(n: int) -> list[int]:
    # rotate by one: every pair gets a different pair's condition
    return [(i + 1) % n for i in range(n)]


def control_experiment(model, test_pairs: Sequence[TrainingPair], cfg: SampleConfig | None = None,
                       out_dir=None, min_pairs: int = 20, window: int = DEFAULT_WINDOW,
                       C: float = DEFAULT_C, batch_size: int = 20) -> EvalReport:
    """Generate each pair with true conditions, a shuffled blueprint, and a shuffled prompt.

    ``control_gap`` is mean edge IoU (true) minus mean edge IoU (shuffled
    blueprint); ``prompt_gap`` is mean colour distance to the true prompt with
    a shuffled prompt minus with the true one. Pair ``i`` always uses seed
    ``cfg.seed + i`` so the three runs share their noise.
    """
    cfg = cfg or SampleConfig()
    n = len(test_pairs)
    if n < min_pairs:
        raise ConfigError(f"need at least {min_pairs} test pairs, got {n}")
    perm = _derangement(n)
    prompts = torch.stack([p.prompt for p in test_pairs])
    bps = torch.stack([p.blueprint for p in test_pairs])
    seeds = [cfg.seed + i for i in range(n)]

    def run(pr, bp):
        return torch.cat([sample_batch(model, pr[i:i + batch_size], bp[i:i + batch_size], cfg,
                                       seeds[i:i + batch_size]) for i in range(0, n, batch_size)])

    true_out = run(prompts, bps)
    shuf_bp_out = run(prompts, bps[perm])
    shuf_pr_out = run(prompts[perm], bps)
    rows = []
    for i, p in enumerate(test_pairs):
        out_mask = p.target_alpha if p.target_alpha is not None else 1 - (p.target.mean(0, keepdim=True) > 0.98).float()
        pr_mask = p.prompt_alpha if p.prompt_alpha is not None else 1 - (p.prompt.mean(0, keepdim=True) > 0.98).float()
        rows.append({
            "pair": i,
            "edge_iou": edge_iou(true_out[i], p.blueprint, window, C),
            "edge_iou_shuffled": edge_iou(shuf_bp_out[i], p.blueprint, window, C),
            "color_emd": color_distance(true_out[i], p.prompt, out_mask, pr_mask),
            "color_emd_shuffled": color_distance(shuf_pr_out[i], p.prompt, out_mask, pr_mask),
        })
        if out_dir is not None:
            d = Path(out_dir) / f"{i:04d}"
            save_png(d / "true.png", true_out[i])
            save_png(d / "shuf_bp.png", shuf_bp_out[i])
            save_png(d / "shuf_prompt.png", shuf_pr_out[i])
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "pair"}
    wins = float(np.mean([r["color_emd"] < r["color_emd_shuffled"] for r in rows]))
    report = EvalReport(
        edge_iou=mean["edge_iou"], edge_iou_shuffled=mean["edge_iou_shuffled"],
        color_emd=mean["color_emd"], color_emd_shuffled=mean["color_emd_shuffled"],
        control_gap=mean["edge_iou"] - mean["edge_iou_shuffled"],
        prompt_gap=mean["color_emd_shuffled"] - mean["color_emd"],
        color_win_rate=wins, n_samples=n, per_pair=rows,
    )
    if out_dir is not None:
        report.to_json(Path(out_dir) / "report.json")
    return report
