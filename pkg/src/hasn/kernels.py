"""Dense NCHW numerical kernels with their backward rules.

Every forward kernel takes and returns plain :class:`numpy.ndarray` values in
(n, c, h, w) layout and never mutates its inputs. Convolution is
cross-correlation with zero padding. Each ``*_backward`` function maps an
upstream gradient to gradients of the differentiable inputs.
"""
from __future__ import annotations

import numpy as np

from .validation import check_nchw, check_positive_int

ACTIVATIONS = ("relu", "leaky_relu", "relu6", "sigmoid", "none")
LEAKY_SLOPE = 0.05
POOL_KINDS = ("max", "avg", "global_avg")


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _window(xp: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int) -> np.ndarray:
    return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _check_conv(x, weight, bias, stride, padding, groups):
    x = check_nchw(x)
    weight = np.asarray(weight)
    if weight.ndim != 4:
        raise ValueError(f"weight must be (c_out, c_in/groups, k, k); got shape {weight.shape}")
    stride = check_positive_int(stride, "stride")
    padding = check_positive_int(padding, "padding", minimum=0)
    groups = check_positive_int(groups, "groups")
    n, c, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size; got {kh}x{kw}")
    if c % groups:
        raise ValueError(f"groups={groups} does not divide input channels c_in={c}")
    if cout % groups:
        raise ValueError(f"groups={groups} does not divide output channels c_out={cout}")
    if cin_g != c // groups:
        raise ValueError(
            f"weight c_in/groups dimension is {cin_g}, expected {c // groups} "
            f"(c_in={c}, groups={groups})"
        )
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (cout,):
            raise ValueError(f"bias must have shape ({cout},) to match c_out; got {bias.shape}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"input height/width ({h}, {w}) too small for kernel {kh} with padding {padding}")
    return x, weight, bias, stride, padding, groups, ho, wo


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """2-D cross-correlation ``out = sum(weight * window) + bias``."""
    x, weight, bias, s, p, g, ho, wo = _check_conv(x, weight, bias, stride, padding, groups)
    n, c, _, _ = x.shape
    cout, cin_g, k, _ = weight.shape
    weight = weight.astype(x.dtype, copy=False)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    if cin_g == 1 and cout == c:
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                out += _window(xp, i, j, ho, wo, s) * weight[:, 0, i, j][None, :, None, None]
    else:
        og = cout // g
        wg = weight.reshape(g, og, cin_g, k, k)
        out = np.zeros((n, g, og, ho * wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                xs = _window(xp, i, j, ho, wo, s).reshape(n, g, cin_g, ho * wo)
                out += np.matmul(wg[:, :, :, i, j], xs)
        out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def conv2d_backward(grad, x, weight, stride: int = 1, padding: int = 0, groups: int = 1, has_bias: bool = True):
    """Gradients of :func:`conv2d` with respect to (x, weight, bias)."""
    n, c, h, w = x.shape
    cout, cin_g, k, _ = weight.shape
    s, p, g = stride, padding, groups
    ho, wo = grad.shape[2], grad.shape[3]
    weight = weight.astype(x.dtype, copy=False)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(weight)
    if cin_g == 1 and cout == c:
        for i in range(k):
            for j in range(k):
                xs = _window(xp, i, j, ho, wo, s)
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", grad, xs)
                gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += (
                    grad * weight[:, 0, i, j][None, :, None, None]
                )
    else:
        og = cout // g
        wg = weight.reshape(g, og, cin_g, k, k)
        gy = grad.reshape(n, g, og, ho * wo)
        gwg = gw.reshape(g, og, cin_g, k, k)
        for i in range(k):
            for j in range(k):
                xs = _window(xp, i, j, ho, wo, s).reshape(n, g, cin_g, ho * wo)
                gwg[:, :, :, i, j] = np.matmul(gy, xs.transpose(0, 1, 3, 2)).sum(axis=0)
                gx_ij = np.matmul(wg[:, :, :, i, j].transpose(0, 2, 1), gy)
                gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gx_ij.reshape(
                    n, c, ho, wo
                )
    gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
    gb = grad.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(gx), gw, gb


def fully_connected(x, weight, bias=None) -> np.ndarray:
    """Per-pixel channel mixing; defined as a 1x1 :func:`conv2d`."""
    x = check_nchw(x)
    weight = np.asarray(weight)
    if weight.ndim != 2:
        raise ValueError(f"weight must be (c_out, c_in); got shape {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"channel mismatch: x has c={x.shape[1]}, weight expects c_in={weight.shape[1]}")
    return conv2d(x, weight.reshape(weight.shape[0], weight.shape[1], 1, 1), bias)


def fully_connected_backward(grad, x, weight, has_bias: bool = True):
    gx, gw, gb = conv2d_backward(grad, x, weight.reshape(*weight.shape, 1, 1), has_bias=has_bias)
    return gx, gw.reshape(weight.shape), gb


# --------------------------------------------------------------------------
# normalization and pointwise maps
# --------------------------------------------------------------------------


def layer_norm_channels(x, gamma, beta, eps: float = 1e-6) -> np.ndarray:
    """Normalize across the channel axis at every (n, h, w) site."""
    return _layer_norm(x, gamma, beta, eps)[0]


def _layer_norm(x, gamma, beta, eps):
    x = check_nchw(x)
    c = x.shape[1]
    if c == 0:
        raise ValueError("layer norm needs at least one channel")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    gamma, beta = np.asarray(gamma), np.asarray(beta)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},); got {gamma.shape}, {beta.shape}")
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    out = xhat * gamma.astype(x.dtype)[None, :, None, None] + beta.astype(x.dtype)[None, :, None, None]
    return out, xhat, inv_std


def layer_norm_channels_backward(grad, xhat, inv_std, gamma):
    gamma = gamma.astype(grad.dtype, copy=False)
    ggamma = (grad * xhat).sum(axis=(0, 2, 3))
    gbeta = grad.sum(axis=(0, 2, 3))
    dxhat = grad * gamma[None, :, None, None]
    gx = inv_std * (
        dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return gx, ggamma, gbeta


def activation(x, kind: str) -> np.ndarray:
    """Elementwise nonlinearity; ``leaky_relu`` uses slope 0.05."""
    x = np.asarray(x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, x * x.dtype.type(LEAKY_SLOPE))
    if kind == "relu6":
        return np.clip(x, 0, 6)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "none":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_backward(grad, x, out, kind: str):
    # derivative at kinks (relu: 0; relu6: 0 and 6) is taken as 0
    if kind == "relu":
        return grad * (x > 0)
    if kind == "leaky_relu":
        return np.where(x > 0, grad, grad * grad.dtype.type(LEAKY_SLOPE))
    if kind == "relu6":
        return grad * ((x > 0) & (x < 6))
    if kind == "sigmoid":
        return grad * out * (1 - out)
    if kind == "none":
        return grad
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def pixel_shuffle(x, r: int) -> np.ndarray:
    """(n, c*r*r, h, w) -> (n, c, h*r, w*r)."""
    x = check_nchw(x)
    r = check_positive_int(r, "r")
    n, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"channels c={c} not divisible by r^2={r * r}")
    co = c // (r * r)
    return np.ascontiguousarray(
        x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)
    )


def pixel_unshuffle(x, r: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle`."""
    x = check_nchw(x)
    r = check_positive_int(r, "r")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ValueError(f"spatial dims ({h}, {w}) not divisible by r={r}")
    return np.ascontiguousarray(
        x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)
    )


def pool2d(x, kind: str, k: int = 1, stride: int = 1) -> np.ndarray:
    return _pool2d(x, kind, k, stride)[0]


def _pool2d(x, kind, k, stride):
    x = check_nchw(x)
    n, c, h, w = x.shape
    if kind == "global_avg":
        return x.mean(axis=(2, 3), keepdims=True), None
    if kind not in POOL_KINDS:
        raise ValueError(f"unknown pool kind {kind!r}; expected one of {POOL_KINDS}")
    k = check_positive_int(k, "k")
    stride = check_positive_int(stride, "stride")
    if k > h or k > w:
        raise ValueError(f"pool window {k} larger than input ({h}, {w})")
    ho, wo = _out_size(h, k, stride, 0), _out_size(w, k, stride, 0)
    if kind == "avg":
        acc = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                acc += _window(x, i, j, ho, wo, stride)
        return acc / x.dtype.type(k * k), None
    best = _window(x, 0, 0, ho, wo, stride).copy()
    arg = np.zeros(best.shape, dtype=np.int32)
    for i in range(k):
        for j in range(k):
            cand = _window(x, i, j, ho, wo, stride)
            better = cand > best
            best[better] = cand[better]
            arg[better] = i * k + j
    return best, arg


def pool2d_backward(grad, x_shape, kind, k, stride, argmax=None):
    n, c, h, w = x_shape
    if kind == "global_avg":
        return np.broadcast_to(grad / grad.dtype.type(h * w), x_shape).copy()
    ho, wo = grad.shape[2], grad.shape[3]
    gx = np.zeros(x_shape, dtype=grad.dtype)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
                  slice(j, j + stride * (wo - 1) + 1, stride))
            if kind == "avg":
                gx[sl] += grad / grad.dtype.type(k * k)
            else:
                gx[sl] += grad * (argmax == i * k + j)
    return gx


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """(out_size, in_size) interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m.astype(dtype)


def resize_bilinear(x, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with align_corners=False semantics."""
    x = check_nchw(x)
    out_h = check_positive_int(out_h, "out_h")
    out_w = check_positive_int(out_w, "out_w")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()
    ry = bilinear_matrix(h, out_h, x.dtype)
    rx = bilinear_matrix(w, out_w, x.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(ry, x), rx.T))


def resize_bilinear_backward(grad, x_shape):
    n, c, h, w = x_shape
    out_h, out_w = grad.shape[2], grad.shape[3]
    if (out_h, out_w) == (h, w):
        return grad
    ry = bilinear_matrix(h, out_h, grad.dtype)
    rx = bilinear_matrix(w, out_w, grad.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(ry.T, grad), rx))
