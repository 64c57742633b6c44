"""Variance-guided fusion of image and text embeddings.

Pipeline: a 2-token transformer encoder over the projected image/text
embeddings produces a scalar fusion weight; the weighted combination is
l2-normalized, the highest-batch-variance dimensions are selected, and a
gated residual amplifies exactly those dimensions before a final
normalization. A baseline mode stops after the united feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor


class DegenerateFusionError(ValueError):
    """A fused row collapsed to (near) zero norm before normalization."""


@dataclass(frozen=True)
class FusionConfig:
    embed_dim: int
    model_dim: int = 512
    layers: int = 2
    heads: int = 8
    head_dim: int = 64
    ffn_mult: int = 4
    mask_ratio: float = 0.2
    epsilon: float = 1e-12

    def __post_init__(self):
        if min(self.embed_dim, self.model_dim, self.layers, self.heads,
               self.head_dim, self.ffn_mult) < 1:
            raise ValueError("all dimensions must be positive")
        if self.model_dim != self.heads * self.head_dim:
            raise ValueError(
                f"model_dim {self.model_dim} != heads*head_dim "
                f"{self.heads * self.head_dim}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio {self.mask_ratio} outside [0, 1]")

    @property
    def mask_k(self) -> int:
        """Mask cardinality: ceil(mask_ratio * D), or 0 when the ratio is 0."""
        if self.mask_ratio == 0.0:
            return 0
        return math.ceil(self.mask_ratio * self.embed_dim)

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim, "model_dim": self.model_dim,
            "layers": self.layers, "heads": self.heads,
            "head_dim": self.head_dim, "ffn_mult": self.ffn_mult,
            "mask_ratio": self.mask_ratio, "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(**d)


@dataclass(frozen=True)
class BatchMask:
    """Top-k highest-variance dimensions of a batch of united features."""

    selected: tuple[int, ...]
    mask: np.ndarray       # (D,) float 0/1
    variances: np.ndarray  # (D,)


class VaGFeMModel:
    """All trainable parameters of the fusion transformer and gating path."""

    def __init__(self, config: FusionConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: FusionConfig, seed: int = 0,
               dtype=np.float32) -> "VaGFeMModel":
        """Fan-in-scaled uniform init; positional embeddings and the fusion
        weight head start at zero so the untrained model blends evenly."""
        rng = np.random.default_rng([int(seed), 0x46474D])  # model-init stream
        params: dict[str, Parameter] = {}

        def uniform(name, fan_in, shape):
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = Parameter(
                name, rng.uniform(-bound, bound, size=shape).astype(dtype))

        def zeros(name, shape):
            params[name] = Parameter(name, np.zeros(shape, dtype=dtype))

        def ones(name, shape):
            params[name] = Parameter(name, np.ones(shape, dtype=dtype))

        d, m = config.embed_dim, config.model_dim
        f = config.ffn_mult * m
        uniform("in_proj.weight", d, (d, m))
        uniform("in_proj.bias", d, (m,))
        zeros("pos", (2, m))
        for i in range(config.layers):
            p = f"layers.{i}."
            ones(p + "ln1.gain", (m,))
            zeros(p + "ln1.bias", (m,))
            for head in ("q", "k", "v", "o"):
                uniform(p + f"attn.{head}.weight", m, (m, m))
                uniform(p + f"attn.{head}.bias", m, (m,))
            ones(p + "ln2.gain", (m,))
            zeros(p + "ln2.bias", (m,))
            uniform(p + "ffn.w1.weight", m, (m, f))
            uniform(p + "ffn.w1.bias", m, (f,))
            uniform(p + "ffn.w2.weight", f, (f, m))
            uniform(p + "ffn.w2.bias", f, (m,))
        ones("final_ln.gain", (m,))
        zeros("final_ln.bias", (m,))
        zeros("omega.weight", (2 * m, 1))
        zeros("omega.bias", (1,))
        return cls(config, params)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    @property
    def dtype(self):
        return self.params["in_proj.weight"].dtype

    def astype(self, dtype) -> "VaGFeMModel":
        return VaGFeMModel(self.config, {
            n: Parameter(n, p.data.astype(dtype)) for n, p in self.params.items()})


# ---------------------------------------------------------------------------
# forward-pass stages


def _encoder_layer(model: VaGFeMModel, x: Tensor, i: int) -> Tensor:
    cfg = model.config
    b = x.shape[0]
    m, h, dh = cfg.model_dim, cfg.heads, cfg.head_dim
    p = f"layers.{i}."

    hidden = dc.layer_norm(x, model[p + "ln1.gain"], model[p + "ln1.bias"])

    def heads_of(kind):
        proj = dc.add(dc.matmul(hidden, model[p + f"attn.{kind}.weight"]),
                      model[p + f"attn.{kind}.bias"])
        return dc.transpose(dc.reshape(proj, (b, 2, h, dh)), (0, 2, 1, 3))

    q, k, v = heads_of("q"), heads_of("k"), heads_of("v")
    scores = dc.scale(dc.bmm(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = dc.bmm(dc.softmax(scores), v)
    ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (b, 2, m))
    attn_out = dc.add(dc.matmul(ctx, model[p + "attn.o.weight"]),
                      model[p + "attn.o.bias"])
    x = dc.add(x, attn_out)

    hidden = dc.layer_norm(x, model[p + "ln2.gain"], model[p + "ln2.bias"])
    ffn = dc.add(dc.matmul(dc.gelu(dc.add(dc.matmul(hidden, model[p + "ffn.w1.weight"]),
                                          model[p + "ffn.w1.bias"])),
                           model[p + "ffn.w2.weight"]),
                 model[p + "ffn.w2.bias"])
    return dc.add(x, ffn)


def fuse_tokens(v: Tensor, t: Tensor, model: VaGFeMModel) -> tuple[Tensor, Tensor]:
    """Run the 2-slot encoder; returns per-modality hidden states (B, M)."""
    cfg = model.config
    if v.shape != t.shape or v.shape[1] != cfg.embed_dim:
        raise ValueError(f"expected two (B, {cfg.embed_dim}) inputs, "
                         f"got {v.shape} and {t.shape}")
    b, m = v.shape[0], cfg.model_dim

    # unit rows are enforced, not assumed
    v = dc.l2_normalize_rows(v, cfg.epsilon)
    t = dc.l2_normalize_rows(t, cfg.epsilon)

    pos_v, pos_t = dc.split(model["pos"], [1, 1], axis=0)
    pv = dc.add(dc.add(dc.matmul(v, model["in_proj.weight"]), model["in_proj.bias"]),
                dc.reshape(pos_v, (m,)))
    pt = dc.add(dc.add(dc.matmul(t, model["in_proj.weight"]), model["in_proj.bias"]),
                dc.reshape(pos_t, (m,)))
    x = dc.concat([dc.reshape(pv, (b, 1, m)), dc.reshape(pt, (b, 1, m))], axis=1)
    for i in range(cfg.layers):
        x = _encoder_layer(model, x, i)
    x = dc.layer_norm(x, model["final_ln.gain"], model["final_ln.bias"])
    hv, ht = dc.split(x, [1, 1], axis=1)
    return dc.reshape(hv, (b, m)), dc.reshape(ht, (b, m))


def fusion_weight(hv: Tensor, ht: Tensor, model: VaGFeMModel) -> Tensor:
    """Scalar fusion weight per row, squashed into (0, 1)."""
    z = dc.add(dc.matmul(dc.concat([hv, ht], axis=1), model["omega.weight"]),
               model["omega.bias"])
    return dc.logistic(z)


def unite(v: Tensor, t: Tensor, omega: Tensor,
          epsilon: float = 1e-12) -> Tensor:
    """l2-normalized convex combination omega*v + (1-omega)*t."""
    one = dc.constant(np.ones((), dtype=omega.dtype))
    mix = dc.add(dc.mul(omega, v), dc.mul(dc.sub(one, omega), t))
    norms = np.linalg.norm(mix.data, axis=1)
    if (norms < 1e-8).any():
        row = int(np.argmin(norms))
        raise DegenerateFusionError(
            f"fused batch row {row} has norm {norms[row]:.3e} < 1e-8")
    return dc.l2_normalize_rows(mix, epsilon)


def variance_mask(u: np.ndarray, k: int) -> BatchMask:
    """Top-k highest population-variance columns; ties to the lowest index."""
    u = np.asarray(u)
    if u.ndim != 2:
        raise ValueError(f"expected (B, D) array, got shape {u.shape}")
    b, d = u.shape
    if not 0 <= k <= d:
        raise ValueError(f"k={k} outside [0, {d}]")
    variances = u.var(axis=0)
    order = np.lexsort((np.arange(d), -variances))
    selected = tuple(sorted(int(i) for i in order[:k]))
    mask = np.zeros(d, dtype=u.dtype)
    mask[list(selected)] = 1.0
    return BatchMask(selected=selected, mask=mask, variances=variances)


def gate_residual(u: Tensor, mask: BatchMask) -> Tensor:
    """logistic(u) * M * u + u; unmasked dims pass through bit-exactly."""
    return dc.gate_residual(u, mask.mask)


def gate_residual_normalize(u: Tensor, mask: BatchMask,
                            epsilon: float = 1e-12) -> Tensor:
    return dc.l2_normalize_rows(gate_residual(u, mask), epsilon)


def forward(v, t, model: VaGFeMModel, mode: str = "vagfem",
            mask: Optional[BatchMask] = None) -> tuple[Tensor, Optional[BatchMask]]:
    """Full query encoder. `mode="baseline"` (or mask_ratio 0) stops at the
    united feature; otherwise the variance mask and gated residual apply.

    A precomputed `mask` may be passed so that two forward passes within
    one training step share the same batch mask statistics.
    """
    cfg = model.config
    if mode not in ("vagfem", "baseline"):
        raise ValueError(f"unknown mode {mode!r}")
    v = v if isinstance(v, Tensor) else dc.constant(np.asarray(v, model.dtype))
    t = t if isinstance(t, Tensor) else dc.constant(np.asarray(t, model.dtype))
    hv, ht = fuse_tokens(v, t, model)
    omega = fusion_weight(hv, ht, model)
    vn = dc.l2_normalize_rows(v, cfg.epsilon)
    tn = dc.l2_normalize_rows(t, cfg.epsilon)
    u = unite(vn, tn, omega, cfg.epsilon)
    if mode == "baseline" or (cfg.mask_k == 0 and mask is None):
        return u, None
    if mask is None:
        mask = variance_mask(u.data, cfg.mask_k)
    if len(mask.selected) == 0:
        return u, mask
    return gate_residual_normalize(u, mask, cfg.epsilon), mask
