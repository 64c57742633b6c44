"""Writer for the FIGE embedding store format.

Layout (little-endian): magic "FIGE", version u32 = 1, count u64,
dim u32, flags u8 (bit 0 = normalized), 3 reserved zero bytes, then
count x dim float32 rows, then an id manifest of (u16 length, UTF-8
bytes) entries. Implemented here from the format description so this
package stays decoupled from the retrieval engine.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

MAGIC = b"FIGE"
VERSION = 1
_HEADER = struct.Struct("<4sIQIB3x")


def write_fige(vectors, ids: Sequence[str], normalized: bool, path) -> None:
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
