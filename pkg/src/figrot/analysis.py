"""Similarity-distribution and mask diagnostics.

Cosine histograms over uniform bins on [-1, 1] (last bin right-closed),
per-dimension variance profiles, and Jaccard stability of the top-k
variance mask across batches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .vagfem import variance_mask

COSINE_SLACK = 1e-6


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray   # bins+1 strictly increasing edges over [-1, 1]
    counts: np.ndarray  # int counts per bin
    count: int
    mean: float
    std: float

    def to_dict(self) -> dict:
        return {
            "edges": [float(e) for e in self.edges],
            "counts": [int(c) for c in self.counts],
            "count": self.count,
            "mean": self.mean,
            "std": self.std,
        }

    def to_csv(self) -> str:
        """Two columns (bin center, count) for external plotting."""
        centers = (self.edges[:-1] + self.edges[1:]) / 2.0
        return "".join(f"{c:.6f} {int(n)}\n"
                       for c, n in zip(centers, self.counts))


def cosine_values(pairs: Sequence[tuple]) -> np.ndarray:
    """Cosines of (query, target) vector pairs; inputs must be unit-norm."""
    if not len(pairs):
        raise ValueError("empty input")
    cos = np.array([float(np.dot(np.asarray(a, np.float64),
                                 np.asarray(b, np.float64)))
                    for a, b in pairs])
    if (np.abs(cos) > 1.0 + COSINE_SLACK).any():
        raise ValueError("cosine outside [-1, 1]: inputs are not unit vectors")
    return np.clip(cos, -1.0, 1.0)


def cosine_histogram(pairs: Sequence[tuple], bins: int = 50) -> Histogram:
    cos = cosine_values(pairs)
    counts, edges = np.histogram(cos, bins=bins, range=(-1.0, 1.0))
    return Histogram(
        edges=edges, counts=counts, count=len(cos),
        mean=float(cos.mean()), std=float(cos.std()))


def sample_negative_pairs(queries: np.ndarray, gallery_vectors: np.ndarray,
                          gallery_ids: Sequence[str],
                          target_id_sets: Sequence[set],
                          seed: int) -> list[tuple]:
    """One seeded random non-matching (query, gallery) pair per query."""
    if len(queries) != len(target_id_sets):
        raise ValueError("queries and target sets lengths differ")
    rng = np.random.default_rng([int(seed), 5])
    pairs = []
    n = len(gallery_ids)
    for q, targets in zip(queries, target_id_sets):
        while True:
            j = int(rng.integers(n))
            if gallery_ids[j] not in targets:
                break
        pairs.append((q, gallery_vectors[j]))
    return pairs


def variance_profile(embeddings: np.ndarray) -> list[tuple[int, float]]:
    """(dim, population variance) sorted descending, ties by dim index.

    The top-k prefix equals the variance-mask selection for the same data.
    """
    x = np.asarray(embeddings)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected non-empty (N, D) array, got {x.shape}")
    var = x.var(axis=0)
    order = np.lexsort((np.arange(x.shape[1]), -var))
    return [(int(d), float(var[d])) for d in order]


def mask_stability(batches: Sequence[np.ndarray], k: int) -> np.ndarray:
    """Pairwise Jaccard overlap of per-batch top-k variance-dim sets."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(batches) < 2:
        raise ValueError("need at least 2 batches")
    dims = {np.asarray(b).shape[1] for b in batches}
    if len(dims) != 1:
        raise ValueError(f"batches disagree on D: {sorted(dims)}")
    sets = [set(variance_mask(np.asarray(b), k).selected) for b in batches]
    n = len(sets)
    out = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            union = len(sets[i] | sets[j])
            out[i, j] = out[j, i] = len(sets[i] & sets[j]) / union
    return out


def histograms_to_json(named: dict[str, Histogram]) -> str:
    return json.dumps({k: h.to_dict() for k, h in sorted(named.items())},
                      indent=2)
