"""Deterministic desk-scale synthetic fixture.

Builds seeded unit image/text embeddings, targets placed near each
query's ideal fusion direction with small noise, and a gallery of all
targets plus 3x random distractors. For large enough D a rejection step
keeps every target the nearest neighbor of its own ideal query, so the
fixture is learnable but not saturated: text-bearing targets follow the
text direction (the reference alone is a hard distractor) while
text-free SBIR targets follow the reference image.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .embedstore import (EMPTY_TEXT_ID, EmbeddingStore, Stores, TripletRecord,
                         read_store, write_store, write_triplets)

NOISE_SCALE = 0.05
_OWN_COS_FLOOR = 0.64   # positives sit near 0.68-0.71 regardless of D
_PAIR_CAP = 0.52        # max |cos| allowed between a probe and a foreign
                        # target direction at draw time
_NN_MARGIN = 0.02
_DISTRACTOR_CAP = 0.60
_MAX_RESAMPLE = 2000


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _text_for(i: int, task: str) -> str:
    words = 4 + i % 4 if task == "CIR" else 2 + i % 3
    return " ".join(f"w{(i * 7 + j) % 23}" for j in range(words))


def gen_synthetic(n_triplets: int, dim: int, seed: int, out_dir) -> dict:
    """Write stores + triplet file under `out_dir`; returns the paths."""
    if n_triplets < 1:
        raise ValueError("n_triplets must be >= 1")
    if dim < 4:
        raise ValueError("dim must be >= 4")
    os.makedirs(out_dir, exist_ok=True)

    empty = _unit(np.random.default_rng([int(seed), 4]), dim)
    rng = np.random.default_rng([int(seed), 3])
    tasks = [("CIR", "SBIR", "CSTBIR")[i % 3] for i in range(n_triplets)]

    # random cross-cosines concentrate at ~2.9/sqrt(D); only enforce the
    # nearest-neighbor margins where that sits safely below the positives
    enforce = 2.9 / np.sqrt(dim) <= _PAIR_CAP

    # draw (reference, text) pairs so every target direction stays far
    # from every foreign probe; probes are the untrained even-blend
    # queries normalize(v + t), target directions are t (or v for SBIR)
    refs, texts, probes, directions = [], [], [], []
    for i, task in enumerate(tasks):
        for _ in range(_MAX_RESAMPLE):
            v = _unit(rng, dim)
            t = _unit(rng, dim) if task != "SBIR" else None
            tok = t if t is not None else empty
            probe = (v + tok) / np.linalg.norm(v + tok)
            direction = t if t is not None else v
            if enforce and probes:
                p_mat = np.stack(probes)
                d_mat = np.stack(directions)
                if (np.abs(p_mat @ direction).max() > _PAIR_CAP
                        or np.abs(probe @ d_mat.T).max() > _PAIR_CAP):
                    continue
            break
        else:
            raise RuntimeError(f"could not place record {i} (dim too small?)")
        refs.append(v)
        texts.append(t)
        probes.append(probe)
        directions.append(direction)
    refs = np.stack(refs)
    probe_mat = np.stack(probes)

    def sample_target(i: int) -> np.ndarray:
        for _ in range(_MAX_RESAMPLE):
            cand = directions[i] + rng.normal(scale=NOISE_SCALE, size=dim)
            cand /= np.linalg.norm(cand)
            if not enforce:
                return cand
            cos = probe_mat @ cand
            own = cos[i]
            cos[i] = -1.0
            if own >= _OWN_COS_FLOOR and cos.max() < own - _NN_MARGIN:
                return cand
        raise RuntimeError(f"could not place target {i} (dim too small?)")

    target_vecs = np.stack([sample_target(i) for i in range(n_triplets)])

    def sample_distractor() -> np.ndarray:
        for _ in range(_MAX_RESAMPLE):
            cand = _unit(rng, dim)
            if not enforce or (probe_mat @ cand).max() < _DISTRACTOR_CAP:
                return cand
        raise RuntimeError("could not place distractor (dim too small?)")

    distractors = np.stack([sample_distractor() for _ in range(3 * n_triplets)])

    ref_ids = [f"img-{i:05d}" for i in range(n_triplets)]
    target_ids = [f"tgt-{i:05d}" for i in range(n_triplets)]
    records = []
    text_ids = []
    text_vecs = []
    for i, task in enumerate(tasks):
        has_text = texts[i] is not None
        if has_text:
            text_ids.append(f"txt-{i:05d}")
            text_vecs.append(texts[i])
        records.append(TripletRecord(
            task=task,
            ref_id=ref_ids[i],
            text=_text_for(i, task) if has_text else None,
            text_id=text_ids[-1] if has_text else None,
            target_ids=(target_ids[i],),
        ))

    paths = {
        "images": os.path.join(out_dir, "images.fige"),
        "texts": os.path.join(out_dir, "texts.fige"),
        "gallery": os.path.join(out_dir, "gallery.fige"),
        "triplets": os.path.join(out_dir, "triplets.jsonl"),
        "manifest": os.path.join(out_dir, "fixture.json"),
    }
    write_store(refs.astype(np.float32), ref_ids, True, paths["images"])
    write_store(np.stack(text_vecs + [empty]).astype(np.float32),
                text_ids + [EMPTY_TEXT_ID], True, paths["texts"])
    gallery_ids = target_ids + [f"dis-{j:05d}" for j in range(3 * n_triplets)]
    write_store(np.concatenate([target_vecs, distractors]).astype(np.float32),
                gallery_ids, True, paths["gallery"])
    write_triplets(records, paths["triplets"])
    with open(paths["manifest"], "w", encoding="utf-8") as fh:
        json.dump({
            "n_triplets": n_triplets, "dim": dim, "seed": seed,
            "noise_scale": NOISE_SCALE, "gallery_size": 4 * n_triplets,
            "margin_rejection": bool(enforce),
        }, fh, indent=2, sort_keys=True)
    return paths


def load_fixture(out_dir) -> tuple[list[TripletRecord], Stores]:
    from .embedstore import load_triplets
    triplets = load_triplets(os.path.join(out_dir, "triplets.jsonl"))
    stores = Stores(
        images=read_store(os.path.join(out_dir, "images.fige")),
        texts=read_store(os.path.join(out_dir, "texts.fige")),
        gallery=read_store(os.path.join(out_dir, "gallery.fige")),
    )
    return triplets, stores
