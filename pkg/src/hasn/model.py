"""Hybrid attention separable network for x2/x3/x4 super-resolution.

Pipeline::

    F0   = conv3x3(x)
    FK   = block_K(... block_1(F0))
    y    = pixel_shuffle(conv3x3(conv3x3(FK) + F0), scale)

Each block is a depthwise-convolution / layer-norm stem, parallel channel-
expanding FC branches fused by a gated product (plus a spatially attended
third branch), an FC projection and a second depthwise convolution carrying
the block's input residual, then a channel attention block.

Parameters live in a flat ordered ``dict`` of float arrays keyed by dotted
names (``blocks.0.fc1.weight`` ...). All forward code is written once against
a :class:`~hasn.autograd.Tape`, so training and inference share it.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import kernels as K
from .autograd import Tape, Var
from .validation import check_nchw

ESA_MIN_SIZE = 8
ESA_POOL_KERNEL = 7
ESA_POOL_STRIDE = 3


@dataclass(frozen=True)
class ModelConfig:
    """Full architectural description; one instance reproduces one ablation row.

    ``fc_branches=2`` with both attentions off gives the plain convolutional
    block (gate(fc1) * fc2, no third branch). ``dw_pointwise`` appends a 1x1
    conv to each depthwise conv.
    """

    dim: int = 52
    num_blocks: int = 6
    dw_kernel: int = 7
    scale: int = 4
    expansion: float = 3.0
    fc_branches: int = 3
    fuse_mode: str = "multiply"
    gate_activation: str = "relu6"
    use_esa: bool = True
    use_cab: bool = True
    per_block_residual: bool = False
    block_residual_position: str = "after_dwconv"
    esa_channels: int = 16
    esa_pool_convs: int = 1
    cab_reduction: int = 3
    cab_squeeze: int = 30
    dw_pointwise: bool = False
    ln_eps: float = 1e-6

    def __post_init__(self):
        errors = []
        if self.dim < 1:
            errors.append(f"dim must be >= 1, got {self.dim}")
        if self.num_blocks < 0:
            errors.append(f"num_blocks must be >= 0, got {self.num_blocks}")
        if self.dw_kernel < 1 or self.dw_kernel % 2 == 0:
            errors.append(f"dw_kernel must be a positive odd integer, got {self.dw_kernel}")
        if self.scale not in (2, 3, 4):
            errors.append(f"scale must be 2, 3 or 4, got {self.scale}")
        width = self.dim * self.expansion
        if width < 1 or abs(width - round(width)) > 1e-9:
            errors.append(f"dim * expansion must be a positive integer, got {width}")
        if self.fc_branches not in (2, 3):
            errors.append(f"fc_branches must be 2 or 3, got {self.fc_branches}")
        if self.fc_branches == 2 and self.use_esa:
            errors.append("use_esa requires fc_branches=3 (ESA acts on the third branch)")
        if self.fuse_mode not in ("multiply", "add"):
            errors.append(f"fuse_mode must be 'multiply' or 'add', got {self.fuse_mode!r}")
        if self.gate_activation not in ("relu6", "relu", "leaky_relu", "none"):
            errors.append(f"unsupported gate_activation {self.gate_activation!r}")
        if self.block_residual_position not in ("after_dwconv", "before_dwconv"):
            errors.append(f"unsupported block_residual_position {self.block_residual_position!r}")
        if self.esa_channels < 1 or self.esa_pool_convs < 0:
            errors.append("esa_channels must be >= 1 and esa_pool_convs >= 0")
        if self.cab_reduction < 1 or self.dim // self.cab_reduction < 1:
            errors.append(f"cab_reduction {self.cab_reduction} leaves no channels at dim {self.dim}")
        if self.cab_squeeze < 1:
            errors.append(f"cab_squeeze must be >= 1, got {self.cab_squeeze}")
        if self.ln_eps <= 0:
            errors.append("ln_eps must be > 0")
        if errors:
            raise ValueError("invalid ModelConfig: " + "; ".join(errors))

    @property
    def width(self) -> int:
        """Channel width of the FC branches."""
        return int(round(self.dim * self.expansion))

    @property
    def cab_channels(self) -> int:
        return self.dim // self.cab_reduction

    @property
    def squeeze_channels(self) -> int:
        return max(1, self.dim // self.cab_squeeze)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# parameter layout
# --------------------------------------------------------------------------


def _conv(shapes, name, cout, cin, k):
    shapes[f"{name}.weight"] = (cout, cin, k, k)
    shapes[f"{name}.bias"] = (cout,)


def _fc(shapes, name, cout, cin):
    shapes[f"{name}.weight"] = (cout, cin)
    shapes[f"{name}.bias"] = (cout,)


def block_param_shapes(cfg: ModelConfig) -> dict:
    """Shapes of one block's parameters, keyed relative to the block."""
    d, e, k = cfg.dim, cfg.width, cfg.dw_kernel
    s: dict = {}
    _conv(s, "dw1", d, 1, k)
    if cfg.dw_pointwise:
        _fc(s, "pw1", d, d)
    s["norm.gamma"] = (d,)
    s["norm.beta"] = (d,)
    for b in range(1, cfg.fc_branches + 1):
        _fc(s, f"fc{b}", e, d)
    _fc(s, "fc_out", d, e)
    _conv(s, "dw2", d, 1, k)
    if cfg.dw_pointwise:
        _fc(s, "pw2", d, d)
    if cfg.use_esa:
        f = cfg.esa_channels
        _conv(s, "esa.conv1", f, e, 1)
        _conv(s, "esa.conv_f", f, f, 1)
        _conv(s, "esa.conv2", f, f, 3)
        for j in range(cfg.esa_pool_convs):
            _conv(s, f"esa.conv3_{j}", f, f, 3)
        _conv(s, "esa.conv4", e, f, 1)
    if cfg.use_cab:
        c, q = cfg.cab_channels, cfg.squeeze_channels
        _conv(s, "cab.conv1", c, d, 3)
        _conv(s, "cab.conv2", d, c, 3)
        _conv(s, "cab.squeeze", q, d, 1)
        _conv(s, "cab.excite", d, q, 1)
    return s


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered mapping of every parameter name to its shape."""
    shapes: dict = {}
    _conv(shapes, "head", cfg.dim, 3, 3)
    block = block_param_shapes(cfg)
    for i in range(cfg.num_blocks):
        for name, shape in block.items():
            shapes[f"blocks.{i}.{name}"] = shape
    _conv(shapes, "body", cfg.dim, cfg.dim, 3)
    _conv(shapes, "recon", 3 * cfg.scale**2, cfg.dim, 3)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Total weights and biases, computed from shapes alone."""
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def param_breakdown(cfg: ModelConfig) -> dict:
    """Parameter totals grouped as head / blocks / body / recon."""
    out = {"head": 0, "blocks": 0, "body": 0, "recon": 0}
    for name, shape in param_shapes(cfg).items():
        out[name.split(".")[0]] += math.prod(shape)
    return out


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """He-uniform (fan-in) weights, zero biases, unit/zero norm affine."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias") or name.endswith(".beta"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = math.sqrt(6.0 / math.prod(shape[1:]))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def check_params(cfg: ModelConfig, params: dict) -> None:
    shapes = param_shapes(cfg)
    missing = [n for n in shapes if n not in params]
    if missing:
        raise KeyError(f"incomplete parameter set; missing: {', '.join(missing)}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"parameter {name} has shape {tuple(params[name].shape)}, expected {shape}")


# --------------------------------------------------------------------------
# taped building blocks
# --------------------------------------------------------------------------


def _sub(P: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in P.items() if k.startswith(prefix + ".")}


def _conv_op(t: Tape, P: dict, name: str, x: Var, stride=1, padding=0, groups=1) -> Var:
    return t.apply("conv2d", x, P[f"{name}.weight"], P[f"{name}.bias"], stride=stride, padding=padding, groups=groups)


def _fc_op(t: Tape, P: dict, name: str, x: Var) -> Var:
    return t.apply("fully_connected", x, P[f"{name}.weight"], P[f"{name}.bias"])


def esa_taped(t: Tape, P: dict, x: Var, pool_convs: int = 1) -> Var:
    """Spatial attention mask applied to ``x``; ``P`` holds ``conv1`` ... ``conv4``."""
    h, w = x.shape[2], x.shape[3]
    if h < ESA_MIN_SIZE or w < ESA_MIN_SIZE:
        raise ValueError(f"ESA needs spatial size >= {ESA_MIN_SIZE}x{ESA_MIN_SIZE}, got {h}x{w}")
    c1 = _conv_op(t, P, "conv1", x)
    cf = _conv_op(t, P, "conv_f", c1)
    c2 = _conv_op(t, P, "conv2", c1, stride=2)
    k = min(ESA_POOL_KERNEL, c2.shape[2], c2.shape[3])
    v = t.apply("pool2d", c2, kind="max", k=k, stride=ESA_POOL_STRIDE)
    for j in range(pool_convs):
        v = _conv_op(t, P, f"conv3_{j}", v, padding=1)
    up = t.apply("resize_bilinear", v, out_h=h, out_w=w)
    mask = t.apply("activation", _conv_op(t, P, "conv4", up + cf), kind="sigmoid")
    return x * mask


def cab_taped(t: Tape, P: dict, x: Var, activation: str = "relu6") -> Var:
    """Conv branch gated by squeeze-excite channel weights, plus local residual."""
    y = _conv_op(t, P, "conv1", x, padding=1)
    y = t.apply("activation", y, kind=activation)
    y = _conv_op(t, P, "conv2", y, padding=1)
    s = t.apply("pool2d", y, kind="global_avg")
    s = t.apply("activation", _conv_op(t, P, "squeeze", s), kind="relu")
    s = t.apply("activation", _conv_op(t, P, "excite", s), kind="sigmoid")
    return x + y * s


def _dwconv(t: Tape, P: dict, cfg: ModelConfig, which: str, x: Var) -> Var:
    y = _conv_op(t, P, f"dw{which}", x, padding=cfg.dw_kernel // 2, groups=cfg.dim)
    if cfg.dw_pointwise:
        y = _fc_op(t, P, f"pw{which}", y)
    return y


def hasb_taped(t: Tape, P: dict, cfg: ModelConfig, x: Var) -> Var:
    if x.shape[1] != cfg.dim:
        raise ValueError(f"block expects {cfg.dim} channels, got {x.shape[1]}")
    f_o = t.apply("layer_norm", _dwconv(t, P, cfg, "1", x), P["norm.gamma"], P["norm.beta"], eps=cfg.ln_eps)
    d1, d2 = _fc_op(t, P, "fc1", f_o), _fc_op(t, P, "fc2", f_o)
    gate = t.apply("activation", d1, kind=cfg.gate_activation)
    fused = gate * d2 if cfg.fuse_mode == "multiply" else gate + d2
    if cfg.fc_branches == 3:
        d3 = _fc_op(t, P, "fc3", f_o)
        fused = fused + (esa_taped(t, _sub(P, "esa"), d3, cfg.esa_pool_convs) if cfg.use_esa else d3)
    proj = _fc_op(t, P, "fc_out", fused)
    if cfg.block_residual_position == "after_dwconv":
        f_d = _dwconv(t, P, cfg, "2", proj) + x
    else:
        f_d = _dwconv(t, P, cfg, "2", proj + x)
    if cfg.use_cab:
        f_d = cab_taped(t, _sub(P, "cab"), f_d, cfg.gate_activation)
    return f_d


def forward_taped(t: Tape, P: dict, cfg: ModelConfig, x: Var, taps: Iterable[int] = ()) -> Var:
    """Full network on a tape. ``taps`` collects feature maps (0 = shallow, i = block i)."""
    if x.shape[1] != 3:
        raise ValueError(f"input must have 3 channels, got {x.shape[1]}")
    taps = set(taps)
    captured = {}
    f0 = _conv_op(t, P, "head", x, padding=1)
    if 0 in taps:
        captured[0] = f0.value
    f = f0
    for i in range(cfg.num_blocks):
        out = hasb_taped(t, _sub(P, f"blocks.{i}"), cfg, f)
        f = out + f if cfg.per_block_residual else out
        if i + 1 in taps:
            captured[i + 1] = f.value
    body = _conv_op(t, P, "body", f, padding=1)
    y = t.apply("pixel_shuffle", _conv_op(t, P, "recon", body + f0, padding=1), r=cfg.scale)
    t.captured = captured
    return y


# --------------------------------------------------------------------------
# array-level entry points
# --------------------------------------------------------------------------


def _run(fn: Callable, params: dict, x) -> np.ndarray:
    t = Tape(record=False)
    x = check_nchw(x)
    P = {k: t.param(k, np.asarray(v, dtype=x.dtype)) for k, v in params.items()}
    return fn(t, P, t.constant(x)).value


def forward(cfg: ModelConfig, params: dict, x) -> np.ndarray:
    """(n, 3, h, w) -> (n, 3, h*scale, w*scale)."""
    check_params(cfg, params)
    return _run(lambda t, P, v: forward_taped(t, P, cfg, v), params, x)


def hasb_forward(cfg: ModelConfig, block_params: dict, x) -> np.ndarray:
    return _run(lambda t, P, v: hasb_taped(t, P, cfg, v), block_params, x)


def esa_forward(params: dict, x, pool_convs: int = 1) -> np.ndarray:
    return _run(lambda t, P, v: esa_taped(t, P, v, pool_convs), params, x)


def cab_forward(params: dict, x, activation: str = "relu6") -> np.ndarray:
    return _run(lambda t, P, v: cab_taped(t, P, v, activation), params, x)


def block_params(params: dict, index: int) -> dict:
    return _sub(params, f"blocks.{index}")


def feature_maps(cfg: ModelConfig, params: dict, x, block_indices: Iterable[int]) -> dict:
    check_params(cfg, params)
    idx = list(block_indices)
    for i in idx:
        if not 0 <= i <= cfg.num_blocks:
            raise IndexError(f"block index {i} outside [0, {cfg.num_blocks}]")
    holder = {}

    def fn(t, P, v):
        y = forward_taped(t, P, cfg, v, taps=idx)
        holder.update(t.captured)
        return y

    _run(fn, params, x)
    return {i: holder[i] for i in idx}


# --------------------------------------------------------------------------
# cost accounting
# --------------------------------------------------------------------------


def _conv_macs(cin, cout, k, h, w, groups=1):
    return k * k * (cin // groups) * cout * h * w


def count_flops(cfg: ModelConfig, out_h: int, out_w: int) -> int:
    """Multiply-accumulates for one forward pass producing an ``out_h x out_w`` image.

    Convolutions and FCs count k*k*(c_in/groups)*c_out per output pixel;
    pooling and bilinear resizing count one per output element. Elementwise
    products, norms and activations are not counted.
    """
    if out_h % cfg.scale or out_w % cfg.scale:
        raise ValueError(f"output size {out_h}x{out_w} not divisible by scale {cfg.scale}")
    h, w = out_h // cfg.scale, out_w // cfg.scale
    d, e, k = cfg.dim, cfg.width, cfg.dw_kernel
    total = _conv_macs(3, d, 3, h, w)
    block = 2 * _conv_macs(d, d, k, h, w, groups=d)
    if cfg.dw_pointwise:
        block += 2 * _conv_macs(d, d, 1, h, w)
    block += cfg.fc_branches * _conv_macs(d, e, 1, h, w) + _conv_macs(e, d, 1, h, w)
    if cfg.use_esa:
        f = cfg.esa_channels
        block += _conv_macs(e, f, 1, h, w) + _conv_macs(f, f, 1, h, w)
        h2, w2 = (h - 3) // 2 + 1, (w - 3) // 2 + 1
        block += _conv_macs(f, f, 3, h2, w2)
        pk = min(ESA_POOL_KERNEL, h2, w2)
        hp, wp = (h2 - pk) // ESA_POOL_STRIDE + 1, (w2 - pk) // ESA_POOL_STRIDE + 1
        block += f * hp * wp
        block += cfg.esa_pool_convs * _conv_macs(f, f, 3, hp, wp)
        block += f * h * w  # bilinear upsample
        block += _conv_macs(f, e, 1, h, w)
    if cfg.use_cab:
        c, q = cfg.cab_channels, cfg.squeeze_channels
        block += _conv_macs(d, c, 3, h, w) + _conv_macs(c, d, 3, h, w)
        block += d + _conv_macs(d, q, 1, 1, 1) + _conv_macs(q, d, 1, 1, 1)
    total += cfg.num_blocks * block
    total += _conv_macs(d, d, 3, h, w)
    total += _conv_macs(d, 3 * cfg.scale**2, 3, h, w)
    return total


# --------------------------------------------------------------------------
# geometric self-ensemble
# --------------------------------------------------------------------------

# (quarter turns, horizontal flip first)
DIHEDRAL = tuple((k, flip) for flip in (False, True) for k in range(4))


def dihedral_apply(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    y = x[..., ::-1] if flip else x
    return np.ascontiguousarray(np.rot90(y, k, axes=(-2, -1)))


def dihedral_invert(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    y = np.rot90(x, -k, axes=(-2, -1))
    return np.ascontiguousarray(y[..., ::-1] if flip else y)


def self_ensemble_infer(cfg: ModelConfig, params: dict, x, model: Callable | None = None) -> np.ndarray:
    """Average of model outputs over the 8 dihedral transforms of ``x``.

    ``model`` overrides the network (any callable array -> array). Outputs are
    summed pairwise so that eight identical results average back bit-exactly.
    """
    x = check_nchw(x)
    if model is None:
        check_params(cfg, params)
        model = lambda v: forward(cfg, params, v)  # noqa: E731
    outs = [dihedral_invert(model(dihedral_apply(x, k, flip)), k, flip) for k, flip in DIHEDRAL]
    while len(outs) > 1:
        outs = [outs[i] + outs[i + 1] for i in range(0, len(outs), 2)]
    return outs[0] / outs[0].dtype.type(len(DIHEDRAL))


# --------------------------------------------------------------------------
# feature visualisation
# --------------------------------------------------------------------------


def grid_layout(channels: int) -> tuple[int, int]:
    """(rows, cols) of the smallest near-square grid holding ``channels`` tiles."""
    cols = math.ceil(math.sqrt(channels))
    return math.ceil(channels / cols), cols


def feature_grid(fmap: np.ndarray) -> np.ndarray:
    """Tile a (c, h, w) map into one uint8 image, each channel min-max scaled."""
    c, h, w = fmap.shape
    rows, cols = grid_layout(c)
    grid = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for ch in range(c):
        plane = fmap[ch].astype(np.float64)
        lo, hi = plane.min(), plane.max()
        tile = np.zeros((h, w)) if hi == lo else (plane - lo) / (hi - lo) * 255.0
        r, col = divmod(ch, cols)
        grid[r * h : (r + 1) * h, col * w : (col + 1) * w] = np.floor(tile + 0.5).astype(np.uint8)
    return grid


def dump_feature_maps(cfg: ModelConfig, params: dict, x, block_indices: Iterable[int]) -> dict:
    """Grayscale grid image (uint8) per requested block output, first batch item."""
    maps = feature_maps(cfg, params, x, block_indices)
    return {i: feature_grid(m[0]) for i, m in maps.items()}
