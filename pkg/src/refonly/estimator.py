"""scikit-learn style estimators over the package's functional core."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .autoencoder import Autoencoder
from .checkpoint import load_model, save_model
from .data import DEFAULT_C, DEFAULT_WINDOW, TrainingPair, extract_blueprint
from .evaluation import edge_iou
from .model import DualCondModel, ModelConfig
from .sampler import SampleConfig, sample_batch
from .trainer import TrainConfig, train, train_autoencoder
from .validation import check_blueprints, check_images


class BlueprintExtractor(TransformerMixin, BaseEstimator):
    """Stateless line-art extraction: ``(N, 3, H, W)`` images to ``(N, 1, H, W)`` masks."""

    def __init__(self, window: int = DEFAULT_WINDOW, C: float = DEFAULT_C):
        self.window = window
        self.C = C

    def fit(self, X, y=None):
        check_images(X, channels=3)
        self.fitted_ = True
        return self

    def transform(self, X):
        imgs = check_images(X, channels=3)
        return torch.stack([extract_blueprint(x, self.window, self.C) for x in imgs]).numpy()


class SpriteAutoencoder(TransformerMixin, BaseEstimator):
    def __init__(self, latent_channels: int = 4, steps: int = 3000, batch_size: int = 32, lr: float = 1e-3,
                 kl: bool = False, kl_weight: float = 0.0, seed: int = 0):
        self.latent_channels = latent_channels
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.kl = kl
        self.kl_weight = kl_weight
        self.seed = seed

    def fit(self, X, y=None):
        imgs = check_images(X, channels=3, multiple_of=8)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            ae = Autoencoder(self.latent_channels, kl=self.kl)
        self.loss_curve_ = train_autoencoder(ae, imgs, self.steps, self.batch_size, self.lr, self.seed,
                                             self.kl_weight)
        self.autoencoder_ = ae
        return self

    def transform(self, X):
        check_is_fitted(self, "autoencoder_")
        with torch.no_grad():
            return self.autoencoder_.encode(check_images(X, channels=3, multiple_of=8)).numpy()

    def inverse_transform(self, Z):
        check_is_fitted(self, "autoencoder_")
        with torch.no_grad():
            return self.autoencoder_.decode(torch.as_tensor(np.asarray(Z), dtype=torch.float32)).numpy()


def _as_batch(X):
    """``X`` is a list of TrainingPairs or a ``(prompts, targets)`` / ``(prompts, targets, blueprints)`` tuple."""
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], TrainingPair):
        return list(X)
    if not isinstance(X, (list, tuple)) or len(X) not in (2, 3):
        raise TypeError("expected TrainingPairs or a (prompts, targets[, blueprints]) tuple")
    prompts = check_images(X[0], channels=3, name="prompts")
    targets = check_images(X[1], channels=3, name="targets")
    if len(X) == 3:
        bps = check_blueprints(X[2])
    else:
        bps = torch.stack([extract_blueprint(t) for t in targets])
    return [TrainingPair(p, t, b, 1.0) for p, t, b in zip(prompts, targets, bps)]


class ReferenceOnlyColorizer(BaseEstimator):
    """Colourize blueprints after a prompt image.

    ``fit`` trains the dual-condition denoiser on (prompt, target) pairs;
    ``predict`` takes ``(prompts, blueprints)`` and returns images in [0, 1]
    as an ``(N, 3, H, W)`` array. ``score`` is the mean edge IoU between the
    generated images and the given blueprints.
    """

    def __init__(self, resolution: int = 32, base_width: int = 32, channel_mults=(1, 2), num_res_blocks: int = 2,
                 context_dim: int = 128, patch: int = 8, prompt_depth: int = 4, T: int = 200,
                 batch_size: int = 16, lr: float = 1e-4, warmup_steps: int = 500, total_steps: int = 15000,
                 weight_decay: float = 0.01, cond_dropout_p: float = 0.1, sample_steps: int = 20,
                 method: str = "ddim", eta: float = 0.0, guidance_scale: float = 1.0, seed: int = 0):
        self.resolution = resolution
        self.base_width = base_width
        self.channel_mults = channel_mults
        self.num_res_blocks = num_res_blocks
        self.context_dim = context_dim
        self.patch = patch
        self.prompt_depth = prompt_depth
        self.T = T
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.weight_decay = weight_decay
        self.cond_dropout_p = cond_dropout_p
        self.sample_steps = sample_steps
        self.method = method
        self.eta = eta
        self.guidance_scale = guidance_scale
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(resolution=self.resolution, base_width=self.base_width,
                           channel_mults=self.channel_mults, num_res_blocks=self.num_res_blocks,
                           context_dim=self.context_dim, patch=self.patch, prompt_depth=self.prompt_depth, T=self.T)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, lr_target=self.lr,
                           warmup_steps=min(self.warmup_steps, self.total_steps), total_steps=self.total_steps,
                           weight_decay=self.weight_decay, cond_dropout_p=self.cond_dropout_p, seed=self.seed,
                           resolution=self.resolution)

    def fit(self, X, y=None):
        pairs = _as_batch(X)
        model = DualCondModel(self._model_config(), seed=self.seed)
        result = train(model, pairs, self._train_config())
        self.model_ = result.model
        self.optimizer_state_ = result.state
        self.loss_curve_ = result.losses
        return self

    def predict(self, X, seed: int | None = None):
        check_is_fitted(self, "model_")
        prompts, bps = X
        prompts = check_images(prompts, channels=3, name="prompts")
        bps = check_blueprints(bps)
        base = self.seed if seed is None else seed
        cfg = SampleConfig(self.sample_steps, self.method, self.eta, self.guidance_scale, base)
        return sample_batch(self.model_, prompts, bps, cfg, [base + i for i in range(len(bps))]).numpy()

    def score(self, X, y=None):
        out = self.predict(X)
        bps = check_blueprints(X[1])
        return float(np.mean([edge_iou(torch.from_numpy(o), b) for o, b in zip(out, bps)]))

    def save(self, path) -> str:
        if not hasattr(self, "model_"):
            raise NotFittedError("fit the colorizer before saving it")
        return save_model(path, self.model_, self._train_config(), getattr(self, "optimizer_state_", None),
                          extra={"estimator_params": _jsonable(self.get_params())})

    @classmethod
    def load(cls, path) -> "ReferenceOnlyColorizer":
        model, manifest, state = load_model(path)
        params = manifest.get("extra", {}).get("estimator_params", {})
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
        est = cls(**params)
        est.model_ = model
        est.optimizer_state_ = state
        return est


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
