"""Hybrid-attention separable network for lightweight single-image super-resolution, in numpy."""

__version__ = "0.1.0"

from .autograd import Tape, Var, grad_check  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .data import DatasetSpec, ImagePair, bicubic_resize, degrade, load_dataset, scan_dataset  # noqa: E402
from .metrics import LossWeights, kl_loss, l1_loss, psnr, rgb_to_y, ssim, stage2_loss  # noqa: E402
from .model import ModelConfig, count_flops, count_params, forward, init_params, self_ensemble_infer  # noqa: E402
from .trainer import TrainConfig, train, warm_start  # noqa: E402

__all__ = [
    "DatasetSpec", "ImagePair", "LossWeights", "ModelConfig", "Tape", "TrainConfig", "Var",
    "bicubic_resize", "count_flops", "count_params", "degrade", "forward", "grad_check", "init_params",
    "kl_loss", "l1_loss", "load_checkpoint", "load_dataset", "psnr", "rgb_to_y", "save_checkpoint",
    "scan_dataset", "self_ensemble_infer", "ssim", "stage2_loss", "train", "warm_start",
]


def __getattr__(name):
    # the estimator pulls in scikit-learn; import it only on demand
    if name == "HASNSuperResolver":
        from .estimator import HASNSuperResolver

        return HASNSuperResolver
    raise AttributeError(name)
