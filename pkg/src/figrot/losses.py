"""InfoNCE, reference-as-hard-negative triplet loss, and their combination.

The triplet negative defaults to the fusion output on (reference, empty
text); `negative_source="raw_reference"` switches to the raw reference
embedding instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from . import vagfem
from .diffcore import Tensor
from .embedstore import Stores, TripletRecord

NEGATIVE_SOURCES = ("fused_empty_text", "raw_reference")

UNIT_ROW_TOL = 1e-4


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.01
    margin: float = 0.3
    lam: float = 0.2
    triplet_enabled: bool = True
    negative_source: str = "fused_empty_text"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature {self.temperature} must be > 0")
        if self.margin < 0:
            raise ValueError(f"margin {self.margin} must be >= 0")
        if self.lam < 0:
            raise ValueError(f"lambda {self.lam} must be >= 0")
        if self.negative_source not in NEGATIVE_SOURCES:
            raise ValueError(f"unknown negative_source {self.negative_source!r}")

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature, "margin": self.margin,
            "lam": self.lam, "triplet_enabled": self.triplet_enabled,
            "negative_source": self.negative_source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    infonce: float
    triplet: float
    total: float


def _check_unit_rows(x: np.ndarray, label: str) -> None:
    norms = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)
    bad = np.abs(norms - 1.0) > UNIT_ROW_TOL
    if bad.any():
        row = int(np.argmax(bad))
        raise ValueError(f"{label} row {row} has norm {norms[row]:.6f}, "
                         "expected unit rows")


def infonce(x: Tensor, y: Tensor, temperature: float) -> Tensor:
    """-1/B sum_i log softmax_j(<x_i, y_j> / tau)[j=i], via log-sum-exp."""
    if temperature <= 0:
        raise ValueError(f"temperature {temperature} must be > 0")
    if x.shape != y.shape or x.data.ndim != 2:
        raise ValueError(f"expected matching (B, D) inputs, got {x.shape}, {y.shape}")
    _check_unit_rows(x.data, "x")
    _check_unit_rows(y.data, "y")
    b = x.shape[0]
    logits = dc.scale(dc.matmul(x, dc.transpose(y, (1, 0))), 1.0 / temperature)
    per_row = dc.sub(dc.logsumexp(logits), dc.diag_part(logits))
    return dc.scale(dc.sum_(per_row), 1.0 / b)


def triplet_loss(q: Tensor, p: Tensor, n: Tensor, margin: float) -> Tensor:
    """Mean hinge on squared distances: max(0, |q-p|^2 - |q-n|^2 + margin)."""
    if not q.shape == p.shape == n.shape or q.data.ndim != 2:
        raise ValueError(
            f"shape mismatch: q {q.shape}, p {p.shape}, n {n.shape}")
    b = q.shape[0]

    def sqdist(a, c):
        d = dc.sub(a, c)
        return dc.sum_(dc.mul(d, d), axis=1)

    margin_t = dc.constant(np.full(b, margin, dtype=q.dtype))
    hinge = dc.relu(dc.add(dc.sub(sqdist(q, p), sqdist(q, n)), margin_t))
    return dc.scale(dc.sum_(hinge), 1.0 / b)


def combined_loss(
    records: Sequence[TripletRecord],
    model: "vagfem.VaGFeMModel",
    stores: Stores,
    config: LossConfig,
    mode: str = "vagfem",
) -> tuple[LossBreakdown, Tensor]:
    """One training-step objective over a batch of triplet records.

    The query forward pass and (when enabled) the empty-text negative
    forward pass share the same batch mask statistics. Returns the
    breakdown and the scalar graph node to backpropagate.
    """
    if not records:
        raise ValueError("empty batch")
    dtype = model.dtype
    v = stores.ref_rows(records).astype(dtype)
    t = stores.text_rows(records).astype(dtype)
    p_rows = stores.target_rows(records).astype(dtype)

    q, mask = vagfem.forward(v, t, model, mode=mode)
    p = dc.constant(p_rows)
    loss_nce = infonce(q, p, config.temperature)

    if config.triplet_enabled:
        if config.negative_source == "fused_empty_text":
            e = stores.empty_text_rows(len(records)).astype(dtype)
            n, _ = vagfem.forward(v, e, model, mode=mode, mask=mask)
        else:
            n = dc.l2_normalize_rows(dc.constant(v))
        loss_tri = triplet_loss(q, p, n, config.margin)
    else:
        loss_tri = dc.constant(np.zeros((), dtype=dtype))

    total = dc.add(loss_nce, dc.scale(loss_tri, config.lam))
    breakdown = LossBreakdown(
        infonce=float(loss_nce.data),
        triplet=float(loss_tri.data),
        total=float(loss_nce.data) + config.lam * float(loss_tri.data),
    )
    return breakdown, total
