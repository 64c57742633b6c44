"""Batch embedding export: encode items, write a FIGE store + manifest."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fige import write_fige

EMPTY_TEXT_ID = "__EMPTY__"
EMPTY_FALLBACK_PROMPT = " "


class DimDriftError(ValueError):
    """Encoded vectors disagree on dimensionality within one export."""


@dataclass
class ExportManifest:
    encoder: str
    revision: str
    modality: str
    head: str
    dim: int
    normalized: bool
    count: int
    sources: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    empty_prompt: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def manifest_path(store_path) -> str:
    return str(store_path) + ".manifest.json"


def _encode_batch(encoder, items, on_error, skipped):
    rows, ids, sources = [], [], []
    for id_, source in items:
        try:
            vec = encoder.encode(source)
        except Exception as exc:
            if on_error == "skip":
                skipped.append(f"{id_}: {exc}")
                continue
            raise ValueError(f"item {id_!r}: {exc}") from exc
        if rows and len(vec) != len(rows[0]):
            raise DimDriftError(
                f"item {id_!r} produced dim {len(vec)}, "
                f"expected {len(rows[0])}")
        rows.append(vec)
        ids.append(id_)
        sources.append(str(source))
    return rows, ids, sources


def export_embeddings(items: Sequence[tuple], modality: str, encoder,
                      out_path, on_error: str = "abort",
                      include_empty: bool = False) -> ExportManifest:
    """Encode (id, source) items into a unit-normalized store at out_path.

    With include_empty (text exports) an "__EMPTY__" row embedding the
    empty prompt is appended; if the encoder rejects the empty string,
    a single space is substituted and recorded in the manifest.
    """
    if on_error not in ("abort", "skip"):
        raise ValueError(f"on_error must be abort or skip, got {on_error!r}")
    skipped: list[str] = []
    rows, ids, sources = _encode_batch(encoder, items, on_error, skipped)

    empty_prompt = None
    if include_empty:
        if modality != "text":
            raise ValueError("the __EMPTY__ row applies to text exports only")
        try:
            empty_prompt = ""
            empty_vec = encoder.encode(empty_prompt)
        except ValueError:
            empty_prompt = EMPTY_FALLBACK_PROMPT
            empty_vec = encoder.encode(empty_prompt)
        if rows and len(empty_vec) != len(rows[0]):
            raise DimDriftError("empty-prompt row dimension drift")
        rows.append(empty_vec)
        ids.append(EMPTY_TEXT_ID)

    if not rows:
        raise ValueError("nothing to export (all items failed or empty list)")
    vectors = np.stack(rows).astype(np.float32)
    write_fige(vectors, ids, True, out_path)
    manifest = ExportManifest(
        encoder=encoder.name, revision=encoder.revision, modality=modality,
        head=encoder.head, dim=vectors.shape[1], normalized=True,
        count=len(ids), sources=sources, skipped=skipped,
        empty_prompt=empty_prompt)
    with open(manifest_path(out_path), "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json() + "\n")
    return manifest


def export_empty_text(encoder, out_path) -> ExportManifest:
    """Single-row store holding the empty-prompt embedding."""
    return export_embeddings([], "text", encoder, out_path,
                             include_empty=True)


def read_text_items(path) -> list[tuple]:
    """One item per input line, ids derived from the line index."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    return [(f"line-{i:05d}", ln) for i, ln in enumerate(lines)]


def read_image_items(path) -> list[tuple]:
    """Input file lists one image path per line; ids from file stems."""
    items = []
    with open(path, encoding="utf-8") as fh:
        for ln in fh:
            p = ln.strip()
            if not p:
                continue
            stem = os.path.splitext(os.path.basename(p))[0]
            items.append((stem, p))
    ids = [i for i, _ in items]
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise ValueError(f"duplicate image stem {dup!r} in input list")
    return items
