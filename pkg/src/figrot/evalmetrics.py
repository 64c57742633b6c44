"""Retrieval metric suite: mAP@K, Recall@K, Precision@K, rank-1, with
per-task and macro reporting.

AP@K uses the truncated normalizer min(K, R), so a perfect ranking scores
1 at any K; "mAP" without a cutoff uses K = gallery size. Dataset-level
values are unweighted means over queries; the macro value is the
unweighted mean of per-task mAP@100 over the tasks present.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import vagfem
from .embedstore import Stores, TripletRecord
from .retrieval import Gallery, batch_search
from .vagfem import VaGFeMModel

MAP_KS = (10, 25, 50, 100, 200)
RECALL_KS = (10, 50)
PRECISION_KS = (10, 100, 200)

AP_DEFINITION = "truncated normalizer min(K, |relevant|)"


def average_precision_at_k(ranked_ids: Sequence[str], relevant: set,
                           k: int) -> float:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not relevant:
        raise ValueError("empty relevant set")
    hits = 0
    total = 0.0
    for i, id_ in enumerate(ranked_ids[:k]):
        if id_ in relevant:
            hits += 1
            total += hits / (i + 1)
    return total / min(k, len(relevant))


def recall_at_k(ranked_ids: Sequence[str], relevant: set, k: int) -> float:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not relevant:
        raise ValueError("empty relevant set")
    return 1.0 if any(id_ in relevant for id_ in ranked_ids[:k]) else 0.0


def precision_at_k(ranked_ids: Sequence[str], relevant: set, k: int) -> float:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not relevant:
        raise ValueError("empty relevant set")
    return sum(1 for id_ in ranked_ids[:k] if id_ in relevant) / k


def rank1(ranked_ids: Sequence[str], relevant: set) -> float:
    if not ranked_ids:
        raise ValueError("empty ranking")
    if not relevant:
        raise ValueError("empty relevant set")
    return 1.0 if ranked_ids[0] in relevant else 0.0


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "vagfem"
    self_exclude: bool = True
    checkpoint_id: Optional[str] = None


@dataclass
class MetricReport:
    per_task: dict[str, dict[str, float]]
    macro_map100: float
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "per_task": {t: dict(sorted(m.items()))
                         for t, m in sorted(self.per_task.items())},
            "macro_map100": self.macro_map100,
            "metadata": dict(sorted(self.metadata.items())),
        }
        return json.dumps(doc, indent=2, sort_keys=False)

    def to_tsv(self) -> str:
        """Flat task/metric/value export for spreadsheet comparison."""
        lines = ["task\tmetric\tvalue"]
        for task in sorted(self.per_task):
            for metric in sorted(self.per_task[task]):
                lines.append(f"{task}\t{metric}\t{self.per_task[task][metric]:.6f}")
        lines.append(f"macro\tmAP@100 Average\t{self.macro_map100:.6f}")
        return "\n".join(lines) + "\n"


def _query_metrics(ranked_ids, relevant, gallery_k) -> dict[str, float]:
    out = {}
    for k in MAP_KS:
        out[f"mAP@{k}"] = average_precision_at_k(ranked_ids, relevant, k)
    out["mAP@all"] = average_precision_at_k(ranked_ids, relevant, gallery_k)
    for k in RECALL_KS:
        out[f"R@{k}"] = recall_at_k(ranked_ids, relevant, k)
    for k in PRECISION_KS:
        out[f"P@{k}"] = precision_at_k(ranked_ids, relevant, k)
    out["rank1"] = rank1(ranked_ids, relevant)
    return out


def evaluate(
    triplets: Sequence[TripletRecord],
    model: VaGFeMModel,
    stores: Stores,
    config: EvalConfig = EvalConfig(),
) -> MetricReport:
    """Fuse all queries in one pass (one logical batch for the variance
    mask), rank the gallery, and assemble the per-task metric report.

    Queries whose targets are entirely removed by self-exclusion score 0
    on every metric and are counted in the metadata, never dropped.
    """
    if not triplets:
        raise ValueError("no evaluation queries")
    stores.validate_records(triplets)
    gallery = Gallery(stores.gallery)

    v = stores.ref_rows(triplets).astype(model.dtype)
    t = stores.text_rows(triplets).astype(model.dtype)
    fused, mask = vagfem.forward(v, t, model, mode=config.mode)
    queries = fused.data

    exclusions = [r.ref_id if config.self_exclude else None for r in triplets]
    rankings = batch_search(list(queries), gallery, k=gallery.size,
                            exclusions=exclusions)

    zero_metrics = {key: 0.0 for key in _query_metrics(
        [gallery.ids[0]], {gallery.ids[0]}, 1)}

    per_task_rows: dict[str, list[dict[str, float]]] = {}
    fully_excluded = 0
    for rec, ranking in zip(triplets, rankings):
        relevant = set(rec.target_ids)
        if config.self_exclude:
            usable = relevant - {rec.ref_id}
        else:
            usable = relevant
        if usable:
            row = _query_metrics(ranking.ids(), usable, gallery.size)
        else:
            fully_excluded += 1
            row = dict(zero_metrics)
        per_task_rows.setdefault(rec.task, []).append(row)

    per_task = {}
    for task, rows in per_task_rows.items():
        per_task[task] = {key: sum(r[key] for r in rows) / len(rows)
                          for key in rows[0]}
    macro = float(np.mean([per_task[t]["mAP@100"] for t in per_task]))

    metadata = {
        "gallery_size": gallery.size,
        "query_count": len(triplets),
        "self_exclusion": config.self_exclude,
        "checkpoint": config.checkpoint_id,
        "mode": config.mode,
        "ap_definition": AP_DEFINITION,
        "fully_excluded_queries": fully_excluded,
        "mask_selected_dims": list(mask.selected) if mask is not None else None,
        "tasks_present": sorted(per_task),
    }
    return MetricReport(per_task=per_task, macro_map100=macro, metadata=metadata)
