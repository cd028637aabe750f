"""Image I/O, bicubic degradation, dataset pairing, patch sampling, augmentation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .model import dihedral_apply
from .validation import check_nchw, check_positive_int

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")
# bump when bicubic_resize output changes so stale LR caches are not reused
KERNEL_VERSION = 1


class ImageReadError(ValueError):
    pass


# --------------------------------------------------------------------------
# image I/O
# --------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """8-bit image file -> (1, 3, h, w) float32 in [0, 1]; grayscale is replicated."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (FileNotFoundError, IsADirectoryError) as exc:
        raise ImageReadError(f"cannot read image {path}: file not found") from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageReadError(f"cannot read image {path}: unsupported or corrupt ({exc})") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255.0))


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Round half up onto the 8-bit lattice after clamping to [0, 1]."""
    return np.floor(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(path, img) -> None:
    """Write (1, 3, h, w) / (1, 1, h, w) floats in [0, 1], or an (h, w) uint8 plane."""
    path = Path(path)
    arr = np.asarray(img)
    if arr.ndim == 2 and arr.dtype == np.uint8:
        Image.fromarray(arr, mode="L").save(path)
        return
    arr = check_nchw(arr, "img")
    if arr.shape[0] != 1 or arr.shape[1] not in (1, 3):
        raise ValueError(f"save_image expects a single 1- or 3-channel image, got {arr.shape}")
    q = to_uint8(arr[0])
    if q.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path)
    else:
        Image.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0)), mode="RGB").save(path)


def image_files(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


# --------------------------------------------------------------------------
# bicubic resampling
# --------------------------------------------------------------------------


def cubic(x) -> np.ndarray:
    """Keys cubic convolution kernel with a = -0.5."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2, ax3 = ax * ax, ax * ax * ax
    return (1.5 * ax3 - 2.5 * ax2 + 1.0) * (ax <= 1) + (-0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0) * (
        (ax > 1) & (ax <= 2)
    )


def bicubic_weights(in_len: int, out_len: int, scale: float) -> np.ndarray:
    """(out_len, in_len) resampling matrix; kernel stretched by 1/scale when shrinking."""
    width = 4.0
    if scale < 1:
        width /= scale
        kernel = lambda d: scale * cubic(scale * d)  # noqa: E731
    else:
        kernel = cubic
    taps = int(math.ceil(width)) + 2
    centres = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(centres - width / 2)
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(centres[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1).astype(np.int64)
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, idx.ravel()), w.ravel())
    return mat


def _as_fraction(scale) -> Fraction:
    return Fraction(scale).limit_denominator(1000)


def bicubic_resize(img, scale) -> np.ndarray:
    """Resize an NCHW image by ``scale`` (e.g. ``Fraction(1, 4)``); out size = round(in * scale)."""
    img = check_nchw(img, "img")
    fr = _as_fraction(scale)
    if fr <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = img.shape[2:]
    oh, ow = int(round(h * fr)), int(round(w * fr))
    if oh < 1 or ow < 1:
        raise ValueError(f"resizing {h}x{w} by {fr} gives an empty image")
    s = float(fr)
    wy = bicubic_weights(h, oh, s)
    wx = bicubic_weights(w, ow, s)
    out = np.matmul(np.matmul(wy, img.astype(np.float64)), wx.T)
    return np.ascontiguousarray(out.astype(img.dtype))


def degrade(hr, scale: int) -> np.ndarray:
    """LR counterpart of an HR image whose sides are multiples of ``scale``.

    The bicubic kernel overshoots near edges; the result is clipped to [0, 1]
    like any stored image would be.
    """
    lr = bicubic_resize(hr, Fraction(1, scale))
    return np.clip(lr, 0.0, 1.0, out=lr)


def crop_to_multiple(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[2:]
    return img[:, :, : h - h % scale, : w - w % scale]


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass
class ImagePair:
    hr: np.ndarray
    lr: np.ndarray
    source_path: str
    scale: int

    def __post_init__(self):
        H, W = self.hr.shape[2:]
        if H % self.scale or W % self.scale:
            raise ValueError(f"{self.source_path}: HR {H}x{W} not divisible by scale {self.scale}")
        if self.lr.shape[2:] != (H // self.scale, W // self.scale):
            raise ValueError(
                f"{self.source_path}: LR {self.lr.shape[2:]} does not match HR {H}x{W} / {self.scale}"
            )


@dataclass
class DatasetSpec:
    hr_dir: list = field(default_factory=list)
    lr_dir: str | None = None
    scale: int = 4
    patch_hr: int = 192
    augment: bool = True
    cache_lr: bool = False

    def __post_init__(self):
        if isinstance(self.hr_dir, (str, Path)):
            self.hr_dir = [self.hr_dir]
        self.hr_dir = [str(d) for d in self.hr_dir]
        check_positive_int(self.scale, "scale")
        if self.patch_hr % self.scale:
            raise ValueError(f"patch_hr {self.patch_hr} not divisible by scale {self.scale}")


@dataclass(frozen=True)
class PairDescriptor:
    stem: str
    hr_path: str
    lr_path: str | None
    hr_size: tuple
    crop_size: tuple

    @property
    def generate_on_load(self) -> bool:
        return self.lr_path is None


@dataclass
class ScanResult:
    pairs: list
    warnings: list

    def __len__(self):
        return len(self.pairs)


def scan_dataset(spec: DatasetSpec) -> ScanResult:
    """Deterministically ordered pair descriptors for every HR image in ``spec``.

    With ``lr_dir`` set, pairing is by filename stem; stems present on one side
    only are reported in ``warnings`` and skipped.
    """
    hr_files = []
    for d in spec.hr_dir:
        if not Path(d).is_dir():
            raise FileNotFoundError(f"HR directory not found: {d}")
        hr_files.extend(image_files(d))
    lr_by_stem = {}
    if spec.lr_dir is not None:
        if not Path(spec.lr_dir).is_dir():
            raise FileNotFoundError(f"LR directory not found: {spec.lr_dir}")
        lr_by_stem = {p.stem: p for p in image_files(spec.lr_dir)}
    warnings = []
    pairs = []
    hr_stems = set()
    for p in hr_files:
        hr_stems.add(p.stem)
        lr = None
        if spec.lr_dir is not None:
            lr = lr_by_stem.get(p.stem)
            if lr is None:
                warnings.append(f"{p.name}: no LR image with stem {p.stem!r}")
                continue
        with Image.open(p) as im:
            w, h = im.size
        crop = (h - h % spec.scale, w - w % spec.scale)
        pairs.append(PairDescriptor(p.stem, str(p), str(lr) if lr else None, (h, w), crop))
    for stem in sorted(set(lr_by_stem) - hr_stems):
        warnings.append(f"{lr_by_stem[stem].name}: no HR image with stem {stem!r}")
    for w_ in warnings:
        log.warning(w_)
    if not pairs:
        raise ValueError(f"no usable image pairs under {', '.join(spec.hr_dir)}")
    return ScanResult(pairs, warnings)


def _cache_path(desc: PairDescriptor, scale: int) -> Path:
    hr = Path(desc.hr_path)
    return hr.parent.with_name(f"{hr.parent.name}_LRx{scale}") / f"{desc.stem}_k{KERNEL_VERSION}.png"


def load_pair(desc: PairDescriptor, scale: int, cache_lr: bool = False) -> ImagePair:
    hr = crop_to_multiple(load_image(desc.hr_path), scale)
    if desc.lr_path is not None:
        lr = load_image(desc.lr_path)
    else:
        cached = _cache_path(desc, scale)
        if cache_lr and cached.is_file():
            lr = load_image(cached)
        else:
            lr = degrade(hr, scale)
            if cache_lr:
                cached.parent.mkdir(parents=True, exist_ok=True)
                save_image(cached, lr)
                lr = load_image(cached)
    return ImagePair(hr, lr, desc.hr_path, scale)


def load_dataset(spec: DatasetSpec) -> list[ImagePair]:
    return [load_pair(d, spec.scale, spec.cache_lr) for d in scan_dataset(spec).pairs]


# --------------------------------------------------------------------------
# patches and augmentation
# --------------------------------------------------------------------------


def pad_to_patch(pair: ImagePair, patch_hr: int) -> ImagePair:
    """Reflect-pad a pair whose HR side is shorter than ``patch_hr``."""
    s = pair.scale
    H, W = pair.hr.shape[2:]
    if H >= patch_hr and W >= patch_hr:
        return pair
    ph, pw = max(0, patch_hr - H) // s, max(0, patch_hr - W) // s
    lr_mode = "reflect" if min(pair.lr.shape[2:]) > max(ph, pw) else "symmetric"
    lr = np.pad(pair.lr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=lr_mode)
    hr = np.pad(pair.hr, ((0, 0), (0, 0), (0, ph * s), (0, pw * s)), mode="symmetric")
    return ImagePair(hr, lr, pair.source_path, s)


def sample_patch(pair: ImagePair, patch_hr: int, rng: np.random.Generator):
    """Aligned (lr_patch, hr_patch) crop; HR offset is always ``scale`` x LR offset."""
    s = pair.scale
    if patch_hr % s:
        raise ValueError(f"patch_hr {patch_hr} not divisible by scale {s}")
    H, W = pair.hr.shape[2:]
    if H < patch_hr or W < patch_hr:
        raise ValueError(f"{pair.source_path}: image {H}x{W} smaller than patch {patch_hr}")
    lp = patch_hr // s
    lh, lw = pair.lr.shape[2:]
    y = int(rng.integers(0, lh - lp + 1))
    x = int(rng.integers(0, lw - lp + 1))
    lr = pair.lr[:, :, y : y + lp, x : x + lp]
    hr = pair.hr[:, :, s * y : s * y + patch_hr, s * x : s * x + patch_hr]
    return lr, hr


def apply_transform(lr, hr, k: int, flip: bool):
    if k % 2 and (lr.shape[2] != lr.shape[3] or hr.shape[2] != hr.shape[3]):
        raise ValueError("90/270 degree rotation needs square patches")
    return dihedral_apply(lr, k, flip), dihedral_apply(hr, k, flip)


def augment(lr, hr, rng: np.random.Generator):
    """Same random rotation (0/90/180/270) and horizontal flip on both patches."""
    k = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    return apply_transform(lr, hr, k, flip)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


def synthetic_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-smooth test image: gradient, shapes, stripes; on the 8-bit lattice."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, base = rng.uniform(-0.4, 0.4, size=3)
        img[c] = 0.5 + base * 0.5 + a * (xx - 0.5) + b * (yy - 0.5)
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0, 1, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.08, 0.35, size=2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        img[:, mask] = color[:, None]
    freq = rng.uniform(4, 12)
    angle = rng.uniform(0, np.pi)
    stripes = 0.12 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    img += stripes[None]
    return (to_uint8(img[None]).astype(np.float32) / np.float32(255.0))


def synthetic_pairs(count: int, size: int, scale: int, seed: int = 0) -> list[ImagePair]:
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        hr = synthetic_image(size, rng)
        pairs.append(ImagePair(hr, degrade(hr, scale), f"synthetic/{seed}/{i:04d}", scale))
    return pairs
