"""Slow, direct-loop reference implementations used as test oracles.

Written independently of the package: explicit index arithmetic, no shared
helpers, float64 throughout.
"""
import math

import numpy as np


def conv2d_ref(x, w, b=None, stride=1, padding=0, groups=1):
    n, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out_per_group = cout // groups
    out = np.zeros((n, cout, ho, wo))
    for b_ in range(n):
        for oc in range(cout):
            g = oc // out_per_group
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(cin_g):
                        c = g * cin_g + ic
                        for ky in range(k):
                            iy = oy * stride + ky - padding
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(k):
                                ix = ox * stride + kx - padding
                                if 0 <= ix < wd:
                                    acc += x[b_, c, iy, ix] * w[oc, ic, ky, kx]
                    out[b_, oc, oy, ox] = acc
    return out


def pool_ref(x, kind, k=1, stride=1):
    n, c, h, w = x.shape
    if kind == "global_avg":
        out = np.zeros((n, c, 1, 1))
        for b in range(n):
            for ch in range(c):
                out[b, ch, 0, 0] = sum(x[b, ch, i, j] for i in range(h) for j in range(w)) / (h * w)
        return out
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    vals = [x[b, ch, i * stride + u, j * stride + v] for u in range(k) for v in range(k)]
                    out[b, ch, i, j] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def _bilinear_src(o, in_size, out_size):
    src = (o + 0.5) * in_size / out_size - 0.5
    if src < 0:
        src = 0.0
    lo = int(math.floor(src))
    if lo > in_size - 1:
        lo = in_size - 1
    hi = lo + 1 if lo + 1 < in_size else in_size - 1
    return lo, hi, src - lo


def bilinear_ref(x, out_h, out_w):
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))
    for i in range(out_h):
        y0, y1, fy = _bilinear_src(i, h, out_h)
        for j in range(out_w):
            x0, x1, fx = _bilinear_src(j, w, out_w)
            out[:, :, i, j] = (
                (1 - fy) * (1 - fx) * x[:, :, y0, x0]
                + (1 - fy) * fx * x[:, :, y0, x1]
                + fy * (1 - fx) * x[:, :, y1, x0]
                + fy * fx * x[:, :, y1, x1]
            )
    return out


def keys_cubic(t):
    t = abs(t)
    if t <= 1:
        return 1.5 * t**3 - 2.5 * t**2 + 1
    if t <= 2:
        return -0.5 * t**3 + 2.5 * t**2 - 4 * t + 2
    return 0.0


def _bicubic_taps(o, in_size, scale):
    """(indices, normalized weights) for output sample ``o``; edge replicated."""
    u = (o + 0.5) / scale - 0.5
    support = 2.0 / scale if scale < 1 else 2.0
    idx, wts = [], []
    for p in range(math.floor(u - support) - 1, math.ceil(u + support) + 2):
        d = u - p
        wgt = scale * keys_cubic(scale * d) if scale < 1 else keys_cubic(d)
        if wgt != 0.0:
            idx.append(min(max(p, 0), in_size - 1))
            wts.append(wgt)
    total = sum(wts)
    return idx, [v / total for v in wts]


def bicubic_ref(img, scale):
    n, c, h, w = img.shape
    oh, ow = int(round(h * scale)), int(round(w * scale))
    out = np.zeros((n, c, oh, ow))
    rows = [_bicubic_taps(i, h, scale) for i in range(oh)]
    cols = [_bicubic_taps(j, w, scale) for j in range(ow)]
    for i, (ri, rw) in enumerate(rows):
        for j, (ci, cw) in enumerate(cols):
            acc = np.zeros((n, c))
            for p, wp in zip(ri, rw):
                for q, wq in zip(ci, cw):
                    acc += wp * wq * img[:, :, p, q]
            out[:, :, i, j] = acc
    return out


def act_ref(x, kind):
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "relu6":
        return np.minimum(np.maximum(x, 0), 6)
    if kind == "leaky_relu":
        return np.where(x > 0, x, 0.05 * x)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    return x


def layer_norm_ref(x, gamma, beta, eps):
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                v = x[b, :, i, j]
                mu = sum(v) / c
                var = sum((vi - mu) ** 2 for vi in v) / c
                out[b, :, i, j] = (v - mu) / math.sqrt(var + eps) * gamma + beta
    return out


def fc_ref(x, w, b):
    n, cin, h, wd = x.shape
    out = np.zeros((n, w.shape[0], h, wd))
    for o in range(w.shape[0]):
        out[:, o] = b[o] + sum(w[o, i] * x[:, i] for i in range(cin))
    return out


def pixel_shuffle_ref(x, r):
    n, c, h, w = x.shape
    co = c // (r * r)
    out = np.zeros((n, co, h * r, w * r))
    for ch in range(co):
        for i in range(h * r):
            for j in range(w * r):
                out[:, ch, i, j] = x[:, ch * r * r + (i % r) * r + (j % r), i // r, j // r]
    return out


def esa_ref(P, x, pool_convs=1):
    h, w = x.shape[2:]
    c1 = conv2d_ref(x, P["conv1.weight"], P["conv1.bias"])
    cf = conv2d_ref(c1, P["conv_f.weight"], P["conv_f.bias"])
    c2 = conv2d_ref(c1, P["conv2.weight"], P["conv2.bias"], stride=2)
    k = min(7, c2.shape[2], c2.shape[3])
    v = pool_ref(c2, "max", k, 3)
    for j in range(pool_convs):
        v = conv2d_ref(v, P[f"conv3_{j}.weight"], P[f"conv3_{j}.bias"], padding=1)
    up = bilinear_ref(v, h, w)
    m = act_ref(conv2d_ref(up + cf, P["conv4.weight"], P["conv4.bias"]), "sigmoid")
    return x * m


def cab_ref(P, x, activation="relu6"):
    y = conv2d_ref(x, P["conv1.weight"], P["conv1.bias"], padding=1)
    y = conv2d_ref(act_ref(y, activation), P["conv2.weight"], P["conv2.bias"], padding=1)
    s = pool_ref(y, "global_avg")
    s = act_ref(conv2d_ref(s, P["squeeze.weight"], P["squeeze.bias"]), "relu")
    s = act_ref(conv2d_ref(s, P["excite.weight"], P["excite.bias"]), "sigmoid")
    return x + y * s


def _sub(P, prefix):
    return {k[len(prefix) + 1 :]: v for k, v in P.items() if k.startswith(prefix + ".")}


def hasb_ref(cfg, P, x):
    pad = cfg.dw_kernel // 2

    def dw(which, v):
        out = conv2d_ref(v, P[f"dw{which}.weight"], P[f"dw{which}.bias"], padding=pad, groups=cfg.dim)
        if cfg.dw_pointwise:
            out = conv2d_ref(out, P[f"pw{which}.weight"][:, :, None, None], P[f"pw{which}.bias"])
        return out

    def fc(name, v):
        return fc_ref(v, P[f"{name}.weight"], P[f"{name}.bias"])

    f_o = layer_norm_ref(dw("1", x), P["norm.gamma"], P["norm.beta"], cfg.ln_eps)
    gate = act_ref(fc("fc1", f_o), cfg.gate_activation)
    d2 = fc("fc2", f_o)
    fused = gate * d2 if cfg.fuse_mode == "multiply" else gate + d2
    if cfg.fc_branches == 3:
        d3 = fc("fc3", f_o)
        fused = fused + (esa_ref(_sub(P, "esa"), d3, cfg.esa_pool_convs) if cfg.use_esa else d3)
    proj = fc("fc_out", fused)
    if cfg.block_residual_position == "after_dwconv":
        f_d = dw("2", proj) + x
    else:
        f_d = dw("2", proj + x)
    if cfg.use_cab:
        f_d = cab_ref(_sub(P, "cab"), f_d, cfg.gate_activation)
    return f_d


def forward_ref(cfg, P, x):
    f0 = conv2d_ref(x, P["head.weight"], P["head.bias"], padding=1)
    f = f0
    for i in range(cfg.num_blocks):
        out = hasb_ref(cfg, _sub(P, f"blocks.{i}"), f)
        f = out + f if cfg.per_block_residual else out
    body = conv2d_ref(f, P["body.weight"], P["body.bias"], padding=1)
    return pixel_shuffle_ref(conv2d_ref(body + f0, P["recon.weight"], P["recon.bias"], padding=1), cfg.scale)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
