"""Distribution analysis: how training separates positives from
negatives in the fused embedding space.

Trains on a small synthetic fixture, then prints positive/negative
cosine histograms before and after training, the top of the variance
profile, and the mask-stability matrix across batches.

Run: python3 demos/similarity_analysis.py
"""

import tempfile

import numpy as np

from figrot.analysis import (cosine_histogram, mask_stability,
                             sample_negative_pairs, variance_profile)
from figrot.embedstore import EMPTY_TEXT_ID
from figrot.synth import gen_synthetic, load_fixture
from figrot.trainer import TrainConfig, train
from figrot.vagfem import FusionConfig, VaGFeMModel, forward


def fused(model, triplets, stores):
    v = np.stack([stores.images.lookup(r.ref_id) for r in triplets])
    t = np.stack([stores.texts.lookup(r.text_id or EMPTY_TEXT_ID)
                  for r in triplets])
    out, _ = forward(v, t, model)
    return out.data


def sketch(hist, width=40):
    peak = hist.counts.max() or 1
    for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
        if c:
            bar = "#" * max(1, int(width * c / peak))
            print(f"  [{lo:+.2f}, {hi:+.2f})  {bar} {c}")


def report(tag, model, triplets, stores):
    q = fused(model, triplets, stores)
    targets = np.stack([stores.gallery.lookup(r.target_ids[0])
                        for r in triplets])
    pos = cosine_histogram(list(zip(q, targets)), bins=20)
    neg_pairs = sample_negative_pairs(
        q, stores.gallery.vectors, stores.gallery.ids,
        [set(r.target_ids) for r in triplets], seed=0)
    neg = cosine_histogram(neg_pairs, bins=20)
    print(f"\n{tag}: positive mean {pos.mean:.3f}, "
          f"negative mean {neg.mean:.3f}, gap {pos.mean - neg.mean:.3f}")
    sketch(pos)


def main():
    with tempfile.TemporaryDirectory() as tmp:
        gen_synthetic(96, 32, 7, tmp)
        triplets, stores = load_fixture(tmp)

        config = TrainConfig(fusion=FusionConfig(embed_dim=32), seed=0)
        untrained = VaGFeMModel.create(config.fusion, seed=0)
        model, _, _ = train(triplets, stores, config)

        report("untrained", untrained, triplets, stores)
        report("trained", model, triplets, stores)

        q = fused(model, triplets, stores)
        print("\ntop-5 variance dimensions of the fused queries:")
        for dim, var in variance_profile(q)[:5]:
            print(f"  dim {dim:3d}  variance {var:.5f}")

        batches = [q[i: i + 32] for i in range(0, len(q), 32)]
        overlap = mask_stability(batches, k=config.fusion.mask_k)
        print("\nmask overlap (Jaccard) across batches:")
        for row in overlap:
            print("  " + "  ".join(f"{x:.2f}" for x in row))


if __name__ == "__main__":
    main()
