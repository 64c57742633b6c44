"""Deterministic offline encoders.

Stand-ins for a pretrained vision-language model that keep the export
pipeline fully reproducible: a character n-gram hashing text encoder
and a pixel-statistics image encoder. Both project into a shared
dimension and are pinned by a revision string, so re-exporting with the
same revision reproduces vectors exactly.
"""

from __future__ import annotations

import zlib

import numpy as np
from PIL import Image

HEADS = ("projection", "pooled")

_NGRAM = 3
_TEXT_BUCKETS = 512
_THUMB = 8


def _seed_for(*parts) -> np.random.Generator:
    tag = "|".join(str(p) for p in parts)
    return np.random.default_rng(zlib.crc32(tag.encode("utf-8")))


def _projection(revision: str, modality: str, head: str, d_in: int,
                d_out: int) -> np.ndarray:
    rng = _seed_for(revision, modality, head, d_in, d_out)
    return rng.standard_normal((d_in, d_out)).astype(np.float64) / np.sqrt(d_in)


def _normalize(x: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        raise ValueError("zero feature vector")
    return (x / norm).astype(np.float32)


class TextEncoder:
    """Hashed character 3-grams, optionally projected to `dim`."""

    name = "chargram"
    revision = "chargram-v1"
    modality = "text"

    def __init__(self, dim: int, head: str = "projection"):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {head!r}")
        self.dim = dim
        self.head = head
        buckets = _TEXT_BUCKETS if head == "projection" else dim
        self._buckets = buckets
        self._proj = (_projection(self.revision, "text", head, buckets, dim)
                      if head == "projection" else None)

    def encode(self, text: str) -> np.ndarray:
        framed = "\x02" + text + "\x03"
        if len(framed) < _NGRAM:
            raise ValueError("text too short to embed (empty input)")
        feats = np.zeros(self._buckets)
        for i in range(len(framed) - _NGRAM + 1):
            h = zlib.crc32(framed[i: i + _NGRAM].encode("utf-8"))
            sign = 1.0 if (h >> 16) & 1 else -1.0
            feats[h % self._buckets] += sign
        if self._proj is not None:
            feats = feats @ self._proj
        return _normalize(feats)


class ImageEncoder:
    """Downsampled pixel features, optionally projected to `dim`."""

    name = "pixstat"
    revision = "pixstat-v1"
    modality = "image"

    def __init__(self, dim: int, head: str = "projection"):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {head!r}")
        self.dim = dim
        self.head = head
        d_in = _THUMB * _THUMB * 3 + 1  # constant slot keeps the norm nonzero
        self._proj = (_projection(self.revision, "image", head, d_in, dim)
                      if head == "projection" else None)

    def _features(self, img: Image.Image) -> np.ndarray:
        rgb = img.convert("RGB").resize((_THUMB, _THUMB), Image.BILINEAR)
        pix = np.asarray(rgb, dtype=np.float64).reshape(-1) / 255.0
        return np.concatenate([pix - pix.mean(), [1.0]])

    def encode(self, path) -> np.ndarray:
        with Image.open(path) as img:
            feats = self._features(img)
        if self._proj is not None:
            feats = feats @ self._proj
        else:
            reps = -(-self.dim // len(feats))
            feats = np.tile(feats, reps)[: self.dim]
        return _normalize(feats)


_ENCODERS = {
    TextEncoder.revision: ("text", TextEncoder),
    ImageEncoder.revision: ("image", ImageEncoder),
}


def get_encoder(encoder_id: str, modality: str, dim: int,
                head: str = "projection"):
    if encoder_id not in _ENCODERS:
        known = ", ".join(sorted(_ENCODERS))
        raise ValueError(f"unknown encoder {encoder_id!r} (known: {known})")
    expect, cls = _ENCODERS[encoder_id]
    if modality != expect:
        raise ValueError(f"encoder {encoder_id!r} embeds {expect}, "
                         f"not {modality}")
    return cls(dim, head)
