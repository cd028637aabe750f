"""Input validation helpers shared by kernels, model, and estimator."""
from __future__ import annotations

import numbers

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


def check_nchw(x, name: str = "x") -> np.ndarray:
    """Return ``x`` as a floating NCHW array, raising ``ValueError`` otherwise."""
    if not isinstance(x, np.ndarray):
        x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank-4 (n, c, h, w); got shape {x.shape}")
    if x.dtype not in FLOAT_DTYPES:
        x = x.astype(np.float32)
    return x


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if not isinstance(value, numbers.Integral) or isinstance(value, bool):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_same_shape(a: np.ndarray, b: np.ndarray, names=("a", "b")) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")


def check_image(img, name: str = "image") -> np.ndarray:
    """Coerce an HWC (or HW) image to float32 HWC in [0, 1].

    uint8 input is divided by 255; float input must already lie in [0, 1].
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"{name} must be HxW, HxWx1 or HxWx3; got shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255.0)
    if not np.issubdtype(arr.dtype, np.floating):
        raise TypeError(f"{name} must be uint8 or floating, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} float values must lie in [0, 1]; got [{arr.min():g}, {arr.max():g}]")
    return arr.astype(np.float32, copy=False)


def hwc_to_nchw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(2, 0, 1)[None])


def nchw_to_hwc(x: np.ndarray) -> np.ndarray:
    if x.shape[0] != 1:
        raise ValueError(f"expected a single image (n=1), got batch of {x.shape[0]}")
    return np.ascontiguousarray(x[0].transpose(1, 2, 0))
