"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Covers exactly the operations the fusion graph needs: matmul, elementwise
arithmetic, concat/split/reshape/transpose, logistic, exact GELU, softmax,
layer normalization, per-column batch variance, l2 row normalization, and
the gated-residual op. Every op validates that its output is finite.

Training runs in float32; gradient checking runs the same graph in
float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

L2_EPS = 1e-12

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class GraphError(ValueError):
    """Raised on shape mismatches or invalid graph structure."""


class Tensor:
    """A node in the computation graph.

    `parents` pairs each input tensor with a vector-Jacobian product
    callable mapping the output cotangent to that input's cotangent.
    """

    __slots__ = ("data", "grad", "parents", "requires_grad")

    def __init__(self, data, parents=(), requires_grad=None):
        self.data = np.asarray(data)
        self.parents: tuple = tuple(parents)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in self.parents)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


def _node(data: np.ndarray, parents) -> Tensor:
    if not np.isfinite(data).all():
        raise GraphError("non-finite value produced by graph op")
    return Tensor(data, parents)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` along the axes numpy broadcast over."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _node(out, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _node(out, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _node(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.data * s, [(a, lambda g: g * s)])


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a: (..., K) @ b: (K, N). The right operand must be 2-D."""
    if b.data.ndim != 2 or a.data.shape[-1] != b.data.shape[0]:
        raise GraphError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_a(g):
        return g @ b.data.T

    def grad_b(g):
        k = a.data.shape[-1]
        return a.data.reshape(-1, k).T @ g.reshape(-1, b.data.shape[1])

    return _node(out, [(a, grad_a), (b, grad_b)])


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul with identical leading batch dims."""
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise GraphError(f"bmm shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _node(out, [
        (a, lambda g: g @ np.swapaxes(b.data, -1, -2)),
        (b, lambda g: np.swapaxes(a.data, -1, -2) @ g),
    ])


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _node(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), [(a, lambda g: g.transpose(inv))])


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    parents = []
    offset = 0
    for t in tensors:
        size = t.data.shape[axis]
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offset, offset + size)
        parents.append((t, lambda g, sl=tuple(sl): g[sl]))
        offset += size
    return _node(out, parents)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if sum(sizes) != a.data.shape[axis]:
        raise GraphError(f"split sizes {sizes} do not cover axis {axis} of {a.shape}")
    outs = []
    offset = 0
    for size in sizes:
        sl = [slice(None)] * a.data.ndim
        sl[axis] = slice(offset, offset + size)
        sl = tuple(sl)

        def vjp(g, sl=sl):
            full = np.zeros(a.shape, dtype=g.dtype)
            full[sl] = g
            return full

        outs.append(_node(a.data[sl], [(a, vjp)]))
        offset += size
    return outs


# ---------------------------------------------------------------------------
# nonlinearities


def logistic(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out, [(a, lambda g: g * out * (1.0 - out))])


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi_cdf
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return _node(out, [(a, lambda g: g * (phi_cdf + x * pdf))])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=-1, keepdims=True))

    return _node(out, [(a, vjp)])


def logsumexp(a: Tensor) -> Tensor:
    """Max-subtracted log-sum-exp over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    soft = e / s
    return _node(out, [(a, lambda g: np.expand_dims(g, -1) * soft)])


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain/bias."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def grad_x(g):
        gh = g * gain.data
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    return _node(out, [
        (a, grad_x),
        (gain, lambda g: _unbroadcast(g * xhat, gain.shape)),
        (bias, lambda g: _unbroadcast(g, bias.shape)),
    ])


def l2_normalize_rows(a: Tensor, eps: float = L2_EPS) -> Tensor:
    """x / max(||x||_2, eps) over the last axis."""
    x = a.data
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = x / denom
    live = norms > eps  # below eps the divisor is the constant eps

    def vjp(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return np.where(live, (g - out * proj) / denom, g / eps)

    return _node(out, [(a, vjp)])


def gate_residual(u: Tensor, mask: np.ndarray) -> Tensor:
    """logistic(u) * mask * u + u, with exact pass-through where mask is 0.

    `mask` is a constant 0/1 vector over the last axis; unmasked entries
    take the identity arithmetic path, so they are bit-identical to `u`.
    """
    x = u.data
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[-1:]:
        raise GraphError(f"mask shape {m.shape} does not match last axis of {x.shape}")
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = np.where(m, sig * x + x, x)

    def vjp(g):
        return g * np.where(m, sig + x * sig * (1.0 - sig) + 1.0, 1.0)

    return _node(out, [(u, vjp)])


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).astype(a.dtype, copy=False)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.shape).astype(a.dtype, copy=False)

    return _node(out, [(a, vjp)])


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def column_variance(a: Tensor) -> Tensor:
    """Population variance of each column of a (B, D) matrix."""
    x = a.data
    if x.ndim != 2:
        raise GraphError(f"column_variance expects 2-D input, got {a.shape}")
    b = x.shape[0]
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    out = (xc * xc).mean(axis=0)
    return _node(out, [(a, lambda g: g * 2.0 * xc / b)])


def diag_part(a: Tensor) -> Tensor:
    x = a.data
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise GraphError(f"diag_part expects a square matrix, got {a.shape}")

    def vjp(g):
        full = np.zeros_like(x)
        np.fill_diagonal(full, g)
        return full

    return _node(np.diagonal(x).copy(), [(a, vjp)])


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss: Tensor, params: Iterable[Parameter] = ()) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(node) for every reachable node.

    Returns a name -> gradient dict for `params`; parameters not on the
    path from `loss` receive zero gradients. Each Parameter's `.grad` is
    set as a side effect.
    """
    params = list(params)
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if params and not loss.requires_grad:
        raise GraphError("loss is disconnected from all parameters")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib

    out = {}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[p.name] = p.grad
    return out


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    max_coords_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error of backward() against central differences.

    `f` rebuilds the scalar loss graph from the current parameter values;
    it must be deterministic (two baseline evaluations are compared).
    Relative error uses max(1, |analytic|) as the denominator. When
    `max_coords_per_param` is set, a seeded subset of coordinates per
    parameter is checked instead of all of them.
    """
    base1 = float(f().data)
    zero_grads(params)
    loss = f()
    if float(loss.data) != base1:
        raise GraphError("f is not deterministic: baseline evaluations differ")
    if loss.requires_grad:
        analytic = backward(loss, params)
    else:
        # constant objective: every analytic gradient is zero
        analytic = {p.name: np.zeros_like(p.data) for p in params}

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        an = analytic[p.name].reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(f().data)
            flat[idx] = orig - h
            fm = float(f().data)
            flat[idx] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(fd - an[idx]) / max(1.0, abs(an[idx]))
            worst = max(worst, err)
    return worst
