"""Bit-exact embedding stores, triplet datasets, and dataset filtering tools.

Store file layout (little-endian throughout):

    magic   b"FIGE"
    version u32 = 1
    count   u64
    dim     u32
    flags   u8 (bit 0 = rows are l2-normalized), 3 reserved zero bytes
    payload count*dim float32, row-major
    ids     count entries of (u16 byte length, utf-8 bytes)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

MAGIC = b"FIGE"
VERSION = 1
_HEADER = struct.Struct("<4sIQIB3x")

NORM_TOL = 1e-5

TASKS = ("CIR", "SBIR", "CSTBIR")


class StoreFormatError(ValueError):
    """Raised when a store file violates the binary format."""


class TripletFormatError(ValueError):
    """Raised when a triplet file line cannot be parsed."""


@dataclass(frozen=True)
class EmbeddingStore:
    """Immutable id -> unit-vector map."""

    ids: tuple[str, ...]
    vectors: np.ndarray  # (count, dim) float32
    normalized: bool

    def __post_init__(self):
        object.__setattr__(self, "_index", {i: r for r, i in enumerate(self.ids)})
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate ids in store")
        if not np.isfinite(self.vectors).all():
            raise ValueError("non-finite value in store")
        if self.normalized and self.count:
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            bad = np.abs(norms - 1.0) > NORM_TOL
            if bad.any():
                raise ValueError(
                    f"store flagged normalized but row {int(np.argmax(bad))} "
                    f"has norm {norms[np.argmax(bad)]:.8f}"
                )

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, id_: str) -> bool:
        return id_ in self._index

    def row_index(self, id_: str) -> int:
        try:
            return self._index[id_]
        except KeyError:
            raise KeyError(f"unknown id {id_!r}") from None

    def lookup(self, id_: str) -> np.ndarray:
        return self.vectors[self.row_index(id_)]

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        return self.vectors[[self.row_index(i) for i in ids]]


@dataclass(frozen=True)
class TripletRecord:
    """One training/evaluation example: reference, optional text, targets."""

    task: str
    ref_id: str
    text: Optional[str]
    text_id: Optional[str]
    target_ids: tuple[str, ...]

    def __post_init__(self):
        if self.task not in TASKS:
            raise TripletFormatError(f"unknown task tag {self.task!r}")
        if not self.target_ids:
            raise TripletFormatError("empty target_ids")


@dataclass(frozen=True)
class ScoredPair:
    image_id: str
    text_id: str
    score: float


EMPTY_TEXT_ID = "__EMPTY__"


@dataclass(frozen=True)
class Stores:
    """The three stores a training/evaluation run resolves ids against."""

    images: EmbeddingStore
    texts: EmbeddingStore
    gallery: EmbeddingStore

    def ref_rows(self, records: Sequence[TripletRecord]) -> np.ndarray:
        return self.images.rows([r.ref_id for r in records])

    def text_rows(self, records: Sequence[TripletRecord]) -> np.ndarray:
        """Text embedding per record; image-only queries use "__EMPTY__"."""
        return self.texts.rows([
            r.text_id if r.text_id is not None else EMPTY_TEXT_ID
            for r in records])

    def empty_text_rows(self, count: int) -> np.ndarray:
        return np.repeat(self.texts.lookup(EMPTY_TEXT_ID)[None, :], count, axis=0)

    def target_rows(self, records: Sequence[TripletRecord]) -> np.ndarray:
        """First target per record (the training positive)."""
        return self.gallery.rows([r.target_ids[0] for r in records])

    def validate_records(self, records: Sequence[TripletRecord]) -> None:
        """Check every id resolves; reports the first offending record index."""
        if EMPTY_TEXT_ID not in self.texts:
            raise KeyError(f"text store is missing the {EMPTY_TEXT_ID!r} row")
        for idx, rec in enumerate(records):
            if rec.ref_id not in self.images:
                raise KeyError(f"record {idx}: unresolvable ref_id {rec.ref_id!r}")
            if rec.text_id is not None and rec.text_id not in self.texts:
                raise KeyError(f"record {idx}: unresolvable text_id {rec.text_id!r}")
            for t in rec.target_ids:
                if t not in self.gallery:
                    raise KeyError(f"record {idx}: unresolvable target id {t!r}")


def write_store(vectors, ids: Sequence[str], normalized: bool, path) -> None:
    """Serialize (vectors, ids) to the binary store format at `path`."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2:
        raise ValueError(f"vectors must be 2-D, got shape {vectors.shape}")
    n, d = vectors.shape
    if d < 1:
        raise ValueError("dim must be >= 1")
    if n != len(ids):
        raise ValueError(f"{n} vectors but {len(ids)} ids")
    if len(set(ids)) != n:
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise ValueError(f"duplicate id {dup!r}")
    if not np.isfinite(vectors).all():
        raise ValueError("non-finite value in vectors")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d, 1 if normalized else 0))
        fh.write(vectors.astype("<f4").tobytes(order="C"))
        for id_ in ids:
            raw = id_.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"id too long: {id_[:32]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)


def read_store(path) -> EmbeddingStore:
    """Load and validate a store file written by :func:`write_store`."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise StoreFormatError("file too short for header")
        magic, version, n, d, flags = _HEADER.unpack(head)
        if magic != MAGIC:
            raise StoreFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise StoreFormatError(f"unsupported version {version}")
        if d < 1:
            raise StoreFormatError("dim must be >= 1")
        payload = fh.read(4 * n * d)
        if len(payload) != 4 * n * d:
            raise StoreFormatError("truncated payload")
        vectors = np.frombuffer(payload, dtype="<f4").reshape(n, d).copy()
        ids = []
        for k in range(n):
            lb = fh.read(2)
            if len(lb) != 2:
                raise StoreFormatError(f"truncated id manifest at entry {k}")
            (ln,) = struct.unpack("<H", lb)
            raw = fh.read(ln)
            if len(raw) != ln:
                raise StoreFormatError(f"truncated id manifest at entry {k}")
            ids.append(raw.decode("utf-8"))
        if fh.read(1):
            raise StoreFormatError("trailing bytes after manifest")
    if len(ids) != n:
        raise StoreFormatError(f"manifest count {len(ids)} != header count {n}")
    return EmbeddingStore(ids=tuple(ids), vectors=vectors, normalized=bool(flags & 1))


def load_triplets(path) -> list[TripletRecord]:
    """Parse a JSON-lines triplet file; unknown fields are ignored."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TripletFormatError(f"line {lineno}: malformed JSON ({exc.msg})")
            try:
                rec = TripletRecord(
                    task=obj["task"],
                    ref_id=obj["ref_id"],
                    text=obj.get("text"),
                    text_id=obj.get("text_id"),
                    target_ids=tuple(obj["target_ids"]),
                )
            except TripletFormatError as exc:
                raise TripletFormatError(f"line {lineno}: {exc}") from None
            except KeyError as exc:
                raise TripletFormatError(f"line {lineno}: missing field {exc}") from None
            records.append(rec)
    return records


def write_triplets(records: Iterable[TripletRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "task": rec.task,
                "ref_id": rec.ref_id,
                "text": rec.text,
                "text_id": rec.text_id,
                "target_ids": list(rec.target_ids),
            }) + "\n")


def clip_filter(pairs: Sequence[ScoredPair], threshold: float) -> list[ScoredPair]:
    """Keep exactly the pairs with score strictly above `threshold`.

    Order is preserved; the comparison is strict, so a score equal to the
    threshold is dropped.
    """
    if not -1.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [-1, 1]")
    for p in pairs:
        if not -1.0 - 1e-6 <= p.score <= 1.0 + 1e-6:
            raise ValueError(f"score {p.score} for ({p.image_id}, {p.text_id}) "
                             "is not a cosine similarity")
    return [p for p in pairs if p.score > threshold]


def dataset_stats(triplets: Sequence[TripletRecord]) -> dict:
    """Per-task triplet counts and mean whitespace-token text length.

    Tasks with no text report ``mean_text_word_count`` as None (printed
    as "--" by the CLI).
    """
    out = {}
    for task in TASKS:
        recs = [r for r in triplets if r.task == task]
        lengths = [len(r.text.split()) for r in recs if r.text is not None]
        out[task] = {
            "count": len(recs),
            "mean_text_word_count": (sum(lengths) / len(lengths)) if lengths else None,
        }
    all_lengths = [len(r.text.split()) for r in triplets if r.text is not None]
    out["total"] = {
        "count": len(triplets),
        "mean_text_word_count": (sum(all_lengths) / len(all_lengths))
        if all_lengths else None,
    }
    return out
