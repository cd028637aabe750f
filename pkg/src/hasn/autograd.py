"""Reverse-mode differentiation over the kernels in :mod:`hasn.kernels`.

A :class:`Tape` records one node per kernel call. Each node keeps the ids of
its inputs and whatever forward values its backward rule needs. ``backward``
walks the nodes in reverse append order and accumulates gradients into the
tape's parameter slots, so calling it twice without :meth:`Tape.zero_grad`
doubles every gradient.

Only kernels registered with :func:`register` may be recorded; anything else
is a hard error rather than a silent zero gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels as K


class UnregisteredOpError(KeyError):
    pass


@dataclass(frozen=True)
class OpRule:
    forward: Callable
    backward: Callable


_REGISTRY: dict[str, OpRule] = {}


def register(kind: str, forward: Callable, backward: Callable) -> None:
    """Register ``forward(*values, **attrs) -> (out, ctx)`` and
    ``backward(ctx, grad) -> tuple of input grads (None for non-differentiable)``."""
    _REGISTRY[kind] = OpRule(forward, backward)


def registered_ops() -> list[str]:
    return sorted(_REGISTRY)


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.apply("add", self, self.tape._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.apply("sub", self, self.tape._lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.apply("scale", self, factor=float(other))
        return self.tape.apply("mul", self, self.tape._lift(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape}, dtype={self.value.dtype})"


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    ctx: object = None


@dataclass
class Tape:
    """Append-only record of kernel invocations.

    With ``record=False`` ops run forward only and nothing is stored, which
    is how inference and finite-difference probes reuse the taped code path.
    """

    record: bool = True
    nodes: list = field(default_factory=list)
    param_nodes: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)

    def _new(self, node: _Node | None, value: np.ndarray) -> Var:
        if not self.record:
            return Var(self, -1, value)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, value)

    def constant(self, value) -> Var:
        return self._new(_Node("leaf", ()), np.asarray(value))

    def param(self, name: str, value) -> Var:
        """Register a trainable leaf with an accumulated gradient slot."""
        value = np.asarray(value)
        var = self._new(_Node("param", (), name), value)
        if self.record:
            if name in self.param_nodes:
                raise ValueError(f"parameter {name!r} registered twice")
            self.param_nodes[name] = var.id
            self.grads.setdefault(name, np.zeros_like(value))
        return var

    def params(self, values: dict) -> dict:
        return {name: self.param(name, v) for name, v in values.items()}

    def _lift(self, other) -> Var:
        if isinstance(other, Var):
            if other.tape is not self:
                raise ValueError("cannot mix values from different tapes")
            return other
        return self.constant(other)

    def apply(self, op: str, *inputs: Var, **attrs) -> Var:
        rule = _REGISTRY.get(op)
        if rule is None:
            raise UnregisteredOpError(f"op {op!r} has no registered backward rule")
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"input to {op!r} belongs to a different tape")
        out, ctx = rule.forward(*(v.value for v in inputs), **attrs)
        if not self.record:
            return Var(self, -1, out)
        return self._new(_Node(op, tuple(v.id for v in inputs), ctx), out)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def backward(self, loss: Var) -> dict:
        """Accumulate d(loss)/d(param) into the tape and return the gradient map."""
        if not self.record:
            raise RuntimeError("backward on a non-recording tape")
        if not isinstance(loss, Var) or loss.tape is not self or not 0 <= loss.id < len(self.nodes):
            raise ValueError(f"loss node {getattr(loss, 'id', loss)!r} is not on this tape")
        if loss.value.shape != (1, 1, 1, 1):
            raise ValueError(f"loss must be a (1, 1, 1, 1) scalar, got shape {loss.value.shape}")
        upstream: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node_id in range(loss.id, -1, -1):
            g = upstream.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.kind == "param":
                self.grads[node.ctx] += g
                continue
            if node.kind == "leaf":
                continue
            in_grads = _REGISTRY[node.kind].backward(node.ctx, g)
            for src, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if src in upstream:
                    upstream[src] = upstream[src] + gi
                else:
                    upstream[src] = gi
        return {name: g.copy() for name, g in self.grads.items()}


# --------------------------------------------------------------------------
# rules
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _conv_fwd(x, w, b=None, stride=1, padding=0, groups=1):
    return K.conv2d(x, w, b, stride, padding, groups), (x, w, b is not None, stride, padding, groups)


def _conv_bwd(ctx, g):
    x, w, has_bias, s, p, groups = ctx
    gx, gw, gb = K.conv2d_backward(g, x, w, s, p, groups, has_bias)
    return (gx, gw, gb) if has_bias else (gx, gw)


def _fc_fwd(x, w, b=None):
    return K.fully_connected(x, w, b), (x, w, b is not None)


def _fc_bwd(ctx, g):
    x, w, has_bias = ctx
    gx, gw, gb = K.fully_connected_backward(g, x, w, has_bias)
    return (gx, gw, gb) if has_bias else (gx, gw)


def _ln_fwd(x, gamma, beta, eps=1e-6):
    out, xhat, inv_std = K._layer_norm(x, gamma, beta, eps)
    return out, (xhat, inv_std, gamma)


def _ln_bwd(ctx, g):
    return K.layer_norm_channels_backward(g, *ctx)


def _act_fwd(x, kind="none"):
    out = K.activation(x, kind)
    return out, (x, out, kind)


def _act_bwd(ctx, g):
    x, out, kind = ctx
    return (K.activation_backward(g, x, out, kind),)


def _ps_fwd(x, r=1):
    return K.pixel_shuffle(x, r), r


def _ps_bwd(r, g):
    return (K.pixel_unshuffle(g, r),)


def _pool_fwd(x, kind="max", k=1, stride=1):
    out, arg = K._pool2d(x, kind, k, stride)
    return out, (x.shape, kind, k, stride, arg)


def _pool_bwd(ctx, g):
    shape, kind, k, stride, arg = ctx
    return (K.pool2d_backward(g, shape, kind, k, stride, arg),)


def _resize_fwd(x, out_h=1, out_w=1):
    return K.resize_bilinear(x, out_h, out_w), x.shape


def _resize_bwd(shape, g):
    return (K.resize_bilinear_backward(g, shape),)


def _add_fwd(a, b):
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g):
    return _unbroadcast(g, ctx[0]), _unbroadcast(g, ctx[1])


def _sub_fwd(a, b):
    return a - b, (a.shape, b.shape)


def _sub_bwd(ctx, g):
    return _unbroadcast(g, ctx[0]), -_unbroadcast(g, ctx[1])


def _mul_fwd(a, b):
    return a * b, (a, b)


def _mul_bwd(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(x, factor=1.0):
    return x * x.dtype.type(factor), factor


def _scale_bwd(factor, g):
    return (g * g.dtype.type(factor),)


def _mean_fwd(x):
    return np.full((1, 1, 1, 1), x.mean(), dtype=x.dtype), x.shape


def _mean_bwd(shape, g):
    return (np.full(shape, g.reshape(()) / g.dtype.type(np.prod(shape)), dtype=g.dtype),)


def _sum_fwd(x):
    return np.full((1, 1, 1, 1), x.sum(), dtype=x.dtype), x.shape


def _sum_bwd(shape, g):
    return (np.full(shape, g.reshape(()), dtype=g.dtype),)


register("conv2d", _conv_fwd, _conv_bwd)
register("fully_connected", _fc_fwd, _fc_bwd)
register("layer_norm", _ln_fwd, _ln_bwd)
register("activation", _act_fwd, _act_bwd)
register("pixel_shuffle", _ps_fwd, _ps_bwd)
register("pool2d", _pool_fwd, _pool_bwd)
register("resize_bilinear", _resize_fwd, _resize_bwd)
register("add", _add_fwd, _add_bwd)
register("sub", _sub_fwd, _sub_bwd)
register("mul", _mul_fwd, _mul_bwd)
register("scale", _scale_fwd, _scale_bwd)
register("mean", _mean_fwd, _mean_bwd)
register("sum", _sum_fwd, _sum_bwd)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: dict
    passed: bool
    tol: float
    failures: list = field(default_factory=list)
    kink_crossings: list = field(default_factory=list)

    def __str__(self):
        worst = max(self.max_rel_err.items(), key=lambda kv: kv[1], default=("-", 0.0))
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: worst {worst[0]} rel err {worst[1]:.3e} (tol {self.tol:g}), "
            f"{len(self.kink_crossings)} kink crossing(s)"
        )


def grad_check(
    f: Callable,
    params: dict,
    tol: float = 1e-4,
    step: float = 1e-4,
    sample_above: int = 10_000,
    sample_size: int = 256,
    seed: int = 0,
    grad_floor: float = 1e-6,
    kink_retry: bool = True,
) -> GradCheckReport:
    """Compare taped gradients of ``f`` against central finite differences.

    ``f(tape, pvars)`` must build a scalar loss on ``tape`` from the dict of
    parameter Vars. Parameters are promoted to float64. Entries where both
    gradients are below ``grad_floor`` in magnitude are compared absolutely
    against ``tol * grad_floor``.

    Piecewise-linear ops (relu6, max pool, L1) make the central difference
    wrong whenever the +-``step`` probe straddles a kink. With ``kink_retry``
    an entry that fails is probed again at ``step / 10``: it is accepted only
    if the two numeric estimates disagree by more than ``tol`` (evidence of a
    crossed kink) and the finer estimate matches the analytic gradient. Such
    entries are listed in ``report.kink_crossings``; their error against the
    finer estimate is what enters ``max_rel_err``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    loss = f(tape, tape.params(params))
    if not np.all(np.isfinite(loss.value)):
        return GradCheckReport({}, False, tol, ["forward produced a non-finite loss"])
    analytic = tape.backward(loss)

    def evaluate():
        probe = Tape(record=False)
        return float(f(probe, probe.params(params)).value.reshape(()))

    def rel_err(a, b):
        scale = max(abs(a), abs(b))
        return abs(a - b) / (scale if scale > grad_floor else grad_floor)

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate()
        flat[i] = orig - h
        fm = evaluate()
        flat[i] = orig
        return fp, fm

    rng = np.random.default_rng(seed)
    report = GradCheckReport({}, True, tol)
    for name, value in params.items():
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > sample_above:
            idx = np.sort(rng.choice(flat.size, size=sample_size, replace=False))
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            fp, fm = central(flat, i, step)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.failures.append(f"{name}[{i}]: non-finite forward value")
                report.passed = False
                continue
            gn = (fp - fm) / (2 * step)
            err = rel_err(ga[i], gn)
            if err > tol and kink_retry:
                fp2, fm2 = central(flat, i, step / 10)
                gn2 = (fp2 - fm2) / (step / 5)
                if rel_err(gn, gn2) > tol and rel_err(ga[i], gn2) <= tol:
                    report.kink_crossings.append(f"{name}[{i}]")
                    gn, err = gn2, rel_err(ga[i], gn2)
            worst = max(worst, err)
            if err > tol:
                report.failures.append(f"{name}[{i}]: analytic {ga[i]:.6e} vs numeric {gn:.6e}")
        report.max_rel_err[name] = worst
        if worst > tol:
            report.passed = False
    return report
