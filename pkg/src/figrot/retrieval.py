"""Exact brute-force cosine top-K search over a gallery of unit vectors.

Ties are broken by ascending gallery id; the gallery rows are held in id
order so a stable sort on descending score realizes that rule. Sharded
scans produce bit-identical results to a single scan.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .embedstore import EmbeddingStore, NORM_TOL


@dataclass(frozen=True)
class RankedList:
    query: Optional[str]
    items: tuple[tuple[str, float], ...]
    k_requested: int

    def ids(self) -> list[str]:
        return [i for i, _ in self.items]


class Gallery:
    """Immutable id-sorted view of a target-embedding store."""

    def __init__(self, store: EmbeddingStore):
        if store.count == 0:
            raise ValueError("empty gallery")
        norms = np.linalg.norm(store.vectors.astype(np.float64), axis=1)
        bad = np.abs(norms - 1.0) > NORM_TOL
        if bad.any():
            row = int(np.argmax(bad))
            raise ValueError(f"gallery row {store.ids[row]!r} has norm "
                             f"{norms[row]:.6f}, expected unit rows")
        order = sorted(range(store.count), key=lambda i: store.ids[i])
        self.ids: tuple[str, ...] = tuple(store.ids[i] for i in order)
        self.vectors = np.ascontiguousarray(store.vectors[order])
        self._pos = {id_: i for i, id_ in enumerate(self.ids)}

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, id_: str) -> bool:
        return id_ in self._pos


def _scan(scores: np.ndarray, gallery: Gallery, k: int, lo: int, hi: int,
          exclude_pos: Optional[int]) -> list[tuple[float, str]]:
    """Top-k of gallery rows [lo, hi) as (-score, id) tuples, best first.

    `scores` is the full precomputed score vector, so shard boundaries
    cannot perturb the floating-point values.
    """
    order = np.argsort(-scores[lo:hi], kind="stable")  # rows are id-sorted
    out = []
    for rel in order:
        pos = lo + int(rel)
        if pos == exclude_pos:
            continue
        out.append((-float(scores[pos]), gallery.ids[pos]))
        if len(out) == k:
            break
    return out


def search_topk(q, gallery: Gallery, k: int,
                exclude_id: Optional[str] = None,
                query_key: Optional[str] = None) -> RankedList:
    """Exact top-k by dot product, ties broken by ascending gallery id."""
    q = np.asarray(q)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if q.shape != (gallery.dim,):
        raise ValueError(f"query shape {q.shape} does not match gallery "
                         f"dim {gallery.dim}")
    exclude_pos = gallery._pos.get(exclude_id) if exclude_id is not None else None
    scores = gallery.vectors @ q.astype(gallery.vectors.dtype)
    best = _scan(scores, gallery, k, 0, gallery.size, exclude_pos)
    return RankedList(
        query=query_key,
        items=tuple((id_, -neg) for neg, id_ in best),
        k_requested=k)


def batch_search(queries: Sequence, gallery: Gallery, k: int,
                 exclusions: Optional[Sequence[Optional[str]]] = None,
                 query_keys: Optional[Sequence[str]] = None,
                 shards: int = 1) -> list[RankedList]:
    """Per-query top-k; identical to sequential search_topk regardless of
    the shard count (deterministic merge by score desc, id asc)."""
    if exclusions is None:
        exclusions = [None] * len(queries)
    if query_keys is None:
        query_keys = [None] * len(queries)
    if not len(queries) == len(exclusions) == len(query_keys):
        raise ValueError("queries, exclusions and query_keys lengths differ")
    if shards < 1:
        raise ValueError("shards must be >= 1")

    bounds = np.linspace(0, gallery.size, shards + 1).astype(int)
    results = []
    for qi, (q, excl, key) in enumerate(zip(queries, exclusions, query_keys)):
        try:
            q = np.asarray(q)
            if q.shape != (gallery.dim,):
                raise ValueError(f"query shape {q.shape} does not match "
                                 f"gallery dim {gallery.dim}")
            exclude_pos = gallery._pos.get(excl) if excl is not None else None
            scores = gallery.vectors @ q.astype(gallery.vectors.dtype)
            partials = [
                _scan(scores, gallery, k, int(lo), int(hi), exclude_pos)
                for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
            ]
            merged = heapq.merge(*partials)
            items = tuple((id_, -neg) for neg, id_ in
                          (next(merged) for _ in range(min(
                              k, gallery.size - (exclude_pos is not None)))))
        except ValueError as exc:
            raise ValueError(f"query {qi}: {exc}") from None
        results.append(RankedList(query=key, items=items, k_requested=k))
    return results


def ranked_to_jsonl(ranked: Sequence[RankedList], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in ranked:
            fh.write(json.dumps({
                "query": r.query,
                "results": [{"id": i, "score": s} for i, s in r.items],
            }) + "\n")
