"""Training losses and Y-channel image quality metrics.

Losses accept either plain arrays (returning a float) or taped
:class:`~hasn.autograd.Var` values (returning a differentiable scalar Var).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Var, register
from .validation import check_nchw, check_same_shape

# BT.601 studio-swing luma, the MATLAB rgb2ycbcr convention
Y_COEFFS = (65.481, 128.553, 24.966)
Y_OFFSET = 16.0


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    kl_epsilon: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.kl_epsilon <= 0:
            raise ValueError(f"kl_epsilon must be > 0, got {self.kl_epsilon}")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _l1_fwd(sr, hr):
    check_same_shape(sr, hr, ("sr", "hr"))
    diff = sr - hr
    return np.full((1, 1, 1, 1), np.abs(diff).mean(), dtype=sr.dtype), diff


def _l1_bwd(diff, g):
    return np.sign(diff) * (g.reshape(()) / diff.dtype.type(diff.size)), None


def _kl_parts(sr, hr, eps):
    check_same_shape(sr, hr, ("sr", "hr"))
    if not (np.all(np.isfinite(sr)) and np.all(np.isfinite(hr))):
        raise ValueError("kl_loss received non-finite input")
    n = sr.shape[0]
    s = np.clip(sr, 0, 1).reshape(n, -1) + eps
    t = np.clip(hr, 0, 1).reshape(n, -1) + eps
    s_total = s.sum(axis=1, keepdims=True)
    p_hr = t / t.sum(axis=1, keepdims=True)
    p_sr = s / s_total
    per_image = (p_hr * (np.log(p_hr) - np.log(p_sr))).sum(axis=1)
    return per_image, s, s_total, p_hr


def _kl_fwd(sr, hr, eps=1e-8):
    per_image, s, s_total, p_hr = _kl_parts(sr, hr, eps)
    mask = (sr >= 0) & (sr <= 1)
    return np.full((1, 1, 1, 1), per_image.mean(), dtype=sr.dtype), (sr.shape, s, s_total, p_hr, mask)


def _kl_bwd(ctx, g):
    shape, s, s_total, p_hr, mask = ctx
    n = shape[0]
    d = (1.0 / s_total - p_hr / s) * (g.reshape(()) / n)
    return d.reshape(shape).astype(g.dtype) * mask, None


register("l1_loss", _l1_fwd, _l1_bwd)
register("kl_loss", _kl_fwd, _kl_bwd)


def _as_pair(sr, hr):
    if isinstance(sr, Var):
        return sr, sr.tape._lift(np.asarray(hr.value if isinstance(hr, Var) else hr, dtype=sr.value.dtype))
    return check_nchw(sr, "sr"), check_nchw(hr, "hr")


def l1_loss(sr, hr):
    """Mean absolute difference."""
    sr, hr = _as_pair(sr, hr)
    if isinstance(sr, Var):
        return sr.tape.apply("l1_loss", sr, hr)
    check_same_shape(sr, hr, ("sr", "hr"))
    return float(np.abs(sr.astype(np.float64) - hr).mean())


def kl_loss(sr, hr, eps: float = 1e-8):
    """KL(p_hr || p_sr) with each image treated as one distribution over its pixels.

    Values are clamped to [0, 1] and shifted by ``eps`` before normalizing over
    all pixels and channels of an image; the result is averaged over the batch.
    """
    sr, hr = _as_pair(sr, hr)
    if isinstance(sr, Var):
        return sr.tape.apply("kl_loss", sr, hr, eps=eps)
    per_image, *_ = _kl_parts(sr.astype(np.float64), hr.astype(np.float64), eps)
    return float(per_image.mean())


def stage2_loss(sr, hr, weights: LossWeights = LossWeights()):
    """alpha * L1 + beta * KL."""
    if isinstance(sr, Var):
        total = l1_loss(sr, hr) * weights.alpha
        if weights.beta:
            total = total + kl_loss(sr, hr, weights.kl_epsilon) * weights.beta
        return total
    total = weights.alpha * l1_loss(sr, hr)
    if weights.beta:
        total += weights.beta * kl_loss(sr, hr, weights.kl_epsilon)
    return total


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def rgb_to_y(img) -> np.ndarray:
    """(n, 3, h, w) RGB in [0, 1] -> (n, 1, h, w) luma in [16, 235]."""
    img = check_nchw(img, "img")
    if img.shape[1] != 3:
        raise ValueError(f"rgb_to_y expects 3 channels, got {img.shape[1]}")
    rgb = np.clip(img.astype(np.float64), 0.0, 1.0)
    r, g, b = rgb[:, 0:1], rgb[:, 1:2], rgb[:, 2:3]
    return Y_OFFSET + Y_COEFFS[0] * r + Y_COEFFS[1] * g + Y_COEFFS[2] * b


def _shave(img: np.ndarray, border: int) -> np.ndarray:
    h, w = img.shape[-2:]
    if h < 2 * border + 1 or w < 2 * border + 1:
        raise ValueError(f"image ({h}x{w}) too small for a {border}-pixel border shave")
    if border == 0:
        return img
    return img[..., border:-border, border:-border]


def psnr(sr, hr, scale: int) -> float:
    """PSNR in dB on 8-bit-range values after shaving ``scale`` pixels per side.

    Identical images return ``math.inf``.
    """
    sr, hr = np.asarray(sr, dtype=np.float64), np.asarray(hr, dtype=np.float64)
    check_same_shape(sr, hr, ("sr", "hr"))
    mse = np.mean((_shave(sr, scale) - _shave(hr, scale)) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(255.0**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def _ssim_plane(a: np.ndarray, b: np.ndarray) -> float:
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    g = gaussian_window()
    if a.shape[0] < g.size or a.shape[1] < g.size:
        raise ValueError(f"image ({a.shape[0]}x{a.shape[1]}) smaller than the {g.size}x{g.size} SSIM window")
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(sr, hr, scale: int) -> float:
    """Single-scale SSIM (11x11 Gaussian, sigma 1.5, valid positions) after border shave."""
    sr, hr = np.asarray(sr, dtype=np.float64), np.asarray(hr, dtype=np.float64)
    check_same_shape(sr, hr, ("sr", "hr"))
    a, b = _shave(sr, scale), _shave(hr, scale)
    planes_a = a.reshape(-1, *a.shape[-2:])
    planes_b = b.reshape(-1, *b.shape[-2:])
    return float(np.mean([_ssim_plane(pa, pb) for pa, pb in zip(planes_a, planes_b)]))


def evaluate_pair(sr, hr, scale: int, quantize: bool = False) -> tuple[float, float]:
    """Y-channel (PSNR, SSIM) for RGB images in [0, 1], NCHW.

    With ``quantize`` the RGB values are first snapped to the 8-bit lattice
    and the luma rounded to integers.
    """
    sr, hr = check_nchw(sr, "sr"), check_nchw(hr, "hr")
    if quantize:
        sr = np.floor(np.clip(sr, 0, 1) * 255.0 + 0.5) / 255.0
        hr = np.floor(np.clip(hr, 0, 1) * 255.0 + 0.5) / 255.0
    y_sr, y_hr = rgb_to_y(sr), rgb_to_y(hr)
    if quantize:
        y_sr, y_hr = np.round(y_sr), np.round(y_hr)
    return psnr(y_sr, y_hr, scale), ssim(y_sr, y_hr, scale)


def format_metric_rows(rows) -> str:
    """CSV text ``image,psnr,ssim`` with 6 decimals; infinite PSNR prints as ``inf``."""

    def fmt(v):
        return "inf" if math.isinf(v) else f"{v:.6f}"

    lines = ["image,psnr,ssim"]
    lines += [f"{name},{fmt(p)},{fmt(s)}" for name, p, s in rows]
    return "\n".join(lines) + "\n"
