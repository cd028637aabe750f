"""scikit-learn compatible wrapper around the network and trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .data import ImagePair, crop_to_multiple, degrade
from .metrics import evaluate_pair
from .model import ModelConfig, forward, self_ensemble_infer
from .trainer import TrainConfig, scaled_milestones, train
from .validation import check_image, hwc_to_nchw, nchw_to_hwc


def _as_image_list(X, name):
    if isinstance(X, np.ndarray) and X.ndim == 4:
        return [check_image(x, name) for x in X], True
    if isinstance(X, np.ndarray) and X.ndim in (2, 3):
        raise ValueError(f"{name} must be a sequence of images or an (n, h, w, 3) array; wrap a single image in a list")
    images = [check_image(x, name) for x in X]
    if not images:
        raise ValueError(f"{name} is empty")
    return images, False


class HASNSuperResolver(RegressorMixin, BaseEstimator):
    """Super-resolution estimator: ``fit`` on images, ``predict`` upscales.

    ``fit(X)`` treats ``X`` as HR images and synthesizes LR inputs by bicubic
    degradation; ``fit(X, y)`` takes LR images ``X`` with HR targets ``y``.
    Images are HxWx3 arrays (uint8, or floats in [0, 1]). ``predict`` returns
    float32 images in [0, 1].
    """

    def __init__(
        self,
        scale=4,
        dim=52,
        num_blocks=6,
        dw_kernel=7,
        fuse_mode="multiply",
        gate_activation="relu6",
        use_esa=True,
        use_cab=True,
        total_iters=1000,
        batch=16,
        lr0=2e-4,
        patch_hr=192,
        augment=True,
        loss="l1",
        alpha=1.0,
        beta=1.0,
        self_ensemble=False,
        seed=0,
    ):
        self.scale = scale
        self.dim = dim
        self.num_blocks = num_blocks
        self.dw_kernel = dw_kernel
        self.fuse_mode = fuse_mode
        self.gate_activation = gate_activation
        self.use_esa = use_esa
        self.use_cab = use_cab
        self.total_iters = total_iters
        self.batch = batch
        self.lr0 = lr0
        self.patch_hr = patch_hr
        self.augment = augment
        self.loss = loss
        self.alpha = alpha
        self.beta = beta
        self.self_ensemble = self_ensemble
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim, num_blocks=self.num_blocks, dw_kernel=self.dw_kernel, scale=self.scale,
            fuse_mode=self.fuse_mode, gate_activation=self.gate_activation,
            use_esa=self.use_esa, use_cab=self.use_cab,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            total_iters=self.total_iters, batch=self.batch, lr0=self.lr0,
            milestones=scaled_milestones(self.total_iters), loss=self.loss,
            alpha=self.alpha, beta=self.beta, seed=self.seed, patch_hr=self.patch_hr,
            augment=self.augment, stage=1,
        )

    def fit(self, X, y=None):
        model_cfg = self._model_config()
        train_cfg = self._train_config()
        if y is None:
            hrs, _ = _as_image_list(X, "X")
            hr_arrays = [crop_to_multiple(hwc_to_nchw(h), self.scale) for h in hrs]
            pairs = [ImagePair(h, degrade(h, self.scale), f"X[{i}]", self.scale) for i, h in enumerate(hr_arrays)]
        else:
            lrs, _ = _as_image_list(X, "X")
            hrs, _ = _as_image_list(y, "y")
            if len(lrs) != len(hrs):
                raise ValueError(f"X has {len(lrs)} images but y has {len(hrs)}")
            pairs = [ImagePair(hwc_to_nchw(h), hwc_to_nchw(lo), f"X[{i}]", self.scale) for i, (lo, h) in enumerate(zip(lrs, hrs))]
        result = train(model_cfg, train_cfg, pairs)
        self.model_config_ = model_cfg
        self.params_ = result.params
        self.optimizer_state_ = result.optimizer
        self.n_iter_ = result.iteration
        self.loss_curve_ = [row[2] for row in result.log_rows]
        return self

    def _upscale(self, lr_hwc):
        x = hwc_to_nchw(lr_hwc)
        if self.self_ensemble:
            y = self_ensemble_infer(self.model_config_, self.params_, x)
        else:
            y = forward(self.model_config_, self.params_, x)
        return nchw_to_hwc(np.clip(y, 0, 1))

    def predict(self, X):
        check_is_fitted(self, "params_")
        images, stacked = _as_image_list(X, "X")
        out = [self._upscale(img) for img in images]
        return np.stack(out) if stacked else out

    def score(self, X, y, sample_weight=None):
        """Mean Y-channel PSNR (dB) of ``predict(X)`` against ``y``."""
        preds = self.predict(X)
        targets, _ = _as_image_list(y, "y")
        values = [
            evaluate_pair(hwc_to_nchw(p), hwc_to_nchw(t), self.scale)[0] for p, t in zip(preds, targets)
        ]
        return float(np.average(values, weights=sample_weight))

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.model_config_, self.params_, self.optimizer_state_, self.n_iter_)

    @classmethod
    def from_checkpoint(cls, path, **kwargs) -> "HASNSuperResolver":
        cfg, params, opt, iteration = load_checkpoint(path)
        est = cls(
            scale=cfg.scale, dim=cfg.dim, num_blocks=cfg.num_blocks, dw_kernel=cfg.dw_kernel,
            fuse_mode=cfg.fuse_mode, gate_activation=cfg.gate_activation,
            use_esa=cfg.use_esa, use_cab=cfg.use_cab, **kwargs,
        )
        est.model_config_ = cfg
        est.params_ = params
        est.optimizer_state_ = opt
        est.n_iter_ = iteration
        return est
