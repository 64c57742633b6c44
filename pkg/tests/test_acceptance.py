"""End-to-end acceptance checks.

Each test covers one release criterion and prints a single PASS/FAIL
line (visible with pytest -s or in failure output). The synthetic run
uses the reference training schedule: lr 1e-4, weight decay 1e-2,
batch 32, 2 epochs, temperature 0.01, lambda 0.2.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from figrot import diffcore as dc
from figrot.analysis import cosine_histogram
from figrot.embedstore import (EMPTY_TEXT_ID, EmbeddingStore, ScoredPair,
                               Stores, clip_filter, dataset_stats, read_store,
                               write_store)
from figrot.evalmetrics import (average_precision_at_k, evaluate,
                                precision_at_k, rank1, recall_at_k)
from figrot.losses import LossConfig, combined_loss, infonce, triplet_loss
from figrot.retrieval import Gallery, batch_search
from figrot.synth import gen_synthetic, load_fixture
from figrot.trainer import (AdamWState, Checkpoint, TrainConfig,
                            load_checkpoint, save_checkpoint, train)
from figrot.vagfem import FusionConfig, VaGFeMModel, forward

SMALL = FusionConfig(embed_dim=32, model_dim=32, layers=1, heads=4, head_dim=8)


def verdict(name, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail
                                                    else ""))
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def fx(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx256")
    gen_synthetic(256, 32, 7, out)
    return load_fixture(out)


@pytest.fixture(scope="module")
def paper_cfg():
    return TrainConfig(fusion=FusionConfig(embed_dim=32), seed=0)


@pytest.fixture(scope="module")
def paper_run(fx, paper_cfg):
    triplets, stores = fx
    t0 = time.time()
    model, state, log = train(triplets, stores, paper_cfg)
    return model, state, log, time.time() - t0


def fused_queries(model, records, stores):
    v = np.stack([stores.images.lookup(r.ref_id) for r in records])
    t = np.stack([stores.texts.lookup(r.text_id or EMPTY_TEXT_ID)
                  for r in records])
    out, _ = forward(v, t, model)
    return out.data


def unit_rows(n, d, seed, dtype=np.float64):
    x = np.random.default_rng(seed).normal(size=(n, d)).astype(dtype)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_criterion_1_gradient_fidelity():
    t0 = time.time()

    from test_diffcore import TestPerOpGradients
    per_op = TestPerOpGradients()
    for name in sorted(dir(per_op)):
        if name.startswith("test_"):
            getattr(per_op, name)()

    cfg = FusionConfig(embed_dim=16, model_dim=32, layers=1, heads=4,
                       head_dim=8)
    model = VaGFeMModel.create(cfg, seed=0, dtype=np.float64)
    b, d = 4, 16
    refs = EmbeddingStore(tuple(f"r{i}" for i in range(b)),
                          unit_rows(b, d, 1), True)
    texts = EmbeddingStore(tuple(f"t{i}" for i in range(b)) + (EMPTY_TEXT_ID,),
                           unit_rows(b + 1, d, 2), True)
    gallery = EmbeddingStore(tuple(f"g{i}" for i in range(b)),
                             unit_rows(b, d, 3), True)
    from figrot.embedstore import TripletRecord
    records = [TripletRecord("CIR", f"r{i}", "w", f"t{i}", (f"g{i}",))
               for i in range(b)]
    stores = Stores(images=refs, texts=texts, gallery=gallery)

    err = dc.finite_diff_check(
        lambda: combined_loss(records, model, stores, LossConfig())[1],
        model.parameters(), h=1e-5, max_coords_per_param=12,
        rng=np.random.default_rng(0))
    elapsed = time.time() - t0
    verdict("criterion-1 gradient-fidelity",
            err <= 1e-4 and elapsed < 60.0,
            f"end-to-end fd err {err:.2e}, per-op <= 1e-6, {elapsed:.1f}s")


def test_criterion_2_structural_invariants():
    model = VaGFeMModel.create(SMALL, seed=1)
    v, t = unit_rows(6, 32, 4, np.float32), unit_rows(6, 32, 5, np.float32)

    out, mask = forward(v, t, model)
    norms_ok = np.abs(np.linalg.norm(out.data.astype(np.float64), axis=1)
                      - 1.0).max() <= 1e-6
    card_ok = (FusionConfig(embed_dim=256).mask_k == 52
               and len(mask.selected) == math.ceil(0.2 * 32))

    x = np.random.default_rng(6).normal(size=(5, 32))
    gated = dc.gate_residual(dc.constant(x), mask.mask).data
    unmasked = [i for i in range(32) if i not in mask.selected]
    pass_ok = gated[:, unmasked].tobytes() == x[:, unmasked].tobytes()

    m0 = VaGFeMModel.create(dataclasses.replace(SMALL, mask_ratio=0.0),
                            seed=1)
    out_v, _ = forward(v, t, m0, mode="vagfem")
    out_b, _ = forward(v, t, m0, mode="baseline")
    zero_ok = np.array_equal(out_v.data, out_b.data)

    perm = np.random.default_rng(7).permutation(6)
    out_p, _ = forward(v[perm], t[perm], model)
    perm_ok = np.array_equal(out.data[perm], out_p.data)

    verdict("criterion-2 structural-invariants",
            norms_ok and card_ok and pass_ok and zero_ok and perm_ok,
            f"norms={norms_ok} cardinality={card_ok} passthrough={pass_ok} "
            f"ratio0={zero_ok} permutation={perm_ok}")


def test_criterion_3_loss_identities(fx):
    one = dc.constant(unit_rows(1, 8, 8))
    b1_ok = float(infonce(one, one, 0.01).data) == 0.0

    row = unit_rows(1, 8, 9)
    dup = dc.constant(np.vstack([row, row]))
    ln2_ok = abs(float(infonce(dup, dup, 1.0).data) - math.log(2)) <= 1e-7

    # row-wise shift invariance of the softmax cross-entropy on logits
    def nce_from_logits(lg):
        t = dc.constant(lg)
        return float(dc.scale(dc.sum_(dc.sub(dc.logsumexp(t),
                                             dc.diag_part(t))),
                              1.0 / lg.shape[0]).data)

    logits = np.random.default_rng(10).normal(size=(4, 4))
    shift = np.random.default_rng(11).normal(size=(4, 1))
    shift_ok = abs(nce_from_logits(logits)
                   - nce_from_logits(logits + shift)) <= 1e-6

    q = dc.constant(unit_rows(2, 8, 12))
    p = q
    far = dc.constant(-q.data)
    sat_ok = float(triplet_loss(q, p, far, 0.3).data) == 0.0
    qp = dc.constant(unit_rows(2, 8, 13))
    same = triplet_loss(q, qp, q, 0.3)
    expect = float(np.mean(np.sum((q.data - qp.data) ** 2, axis=1)) + 0.3)
    qn_ok = abs(float(same.data) - expect) <= 1e-12

    triplets, stores = fx
    bd, _ = combined_loss(triplets[:8], VaGFeMModel.create(SMALL, seed=2),
                          stores, LossConfig())
    total_ok = bd.total == bd.infonce + 0.2 * bd.triplet

    verdict("criterion-3 loss-identities",
            b1_ok and ln2_ok and shift_ok and sat_ok and qn_ok and total_ok,
            f"B1={b1_ok} ln2={ln2_ok} shift={shift_ok} hinge0={sat_ok} "
            f"q-eq-n={qn_ok} total-identity={total_ok}")


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(42)
    metric_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 51))
        ids = [f"g{i}" for i in range(n)]
        rng.shuffle(ids)
        r = int(rng.integers(1, min(6, n + 1)))
        rel = set(rng.choice(ids, size=r, replace=False).tolist())
        k = int(rng.integers(1, 21))

        ap_ref = sum((len([x for x in ids[: i + 1] if x in rel]) / (i + 1))
                     for i in range(min(k, n)) if ids[i] in rel) / min(k, r)
        metric_ok &= abs(average_precision_at_k(ids, rel, k) - ap_ref) <= 1e-12
        metric_ok &= abs(recall_at_k(ids, rel, k)
                         - float(bool(set(ids[:k]) & rel))) <= 1e-12
        metric_ok &= abs(precision_at_k(ids, rel, k)
                         - len(set(ids[:k]) & rel) / k) <= 1e-12
        metric_ok &= abs(rank1(ids, rel) - float(ids[0] in rel)) <= 1e-12

    # quantized scores force ties; full-sort oracle applies the same
    # (score desc, id asc) rule in pure python
    vecs = unit_rows(40, 8, 14, np.float32)
    vecs = np.round(vecs, 1)
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    ids = tuple(f"g{i:02d}" for i in np.random.default_rng(15).permutation(40))
    gallery = Gallery(EmbeddingStore(ids, vecs, True))
    queries = unit_rows(5, 8, 16, np.float32)
    shard_ok = True
    for shards in (1, 2, 3, 5):
        got = batch_search(queries, gallery, 10, shards=shards)
        for qi, ranked in enumerate(got):
            scores = gallery.vectors @ queries[qi]
            oracle = sorted(zip(gallery.ids, scores.tolist()),
                            key=lambda p: (-p[1], p[0]))[:10]
            shard_ok &= list(ranked.items) == oracle
    verdict("criterion-4 metric-oracle", metric_ok and shard_ok,
            f"point-metrics={metric_ok} topk-vs-fullsort={shard_ok}")


def test_criterion_5_synthetic_learnability(fx, paper_run):
    triplets, stores = fx
    model, _, log, seconds = paper_run
    em = log.epoch_means()
    means = [em[e]["total"] for e in sorted(em)]
    decreasing = all(b < a for a, b in zip(means, means[1:]))
    report = evaluate(triplets, model, stores)
    r1 = min(task["rank1"] for task in report.per_task.values())
    verdict("criterion-5 synthetic-learnability",
            r1 >= 0.95 and decreasing and seconds < 120.0,
            f"min rank1 {r1:.3f}, epoch means {[round(m, 4) for m in means]}, "
            f"train {seconds:.1f}s")


def test_criterion_6_triplet_loss_effect(fx, paper_cfg, paper_run):
    triplets, stores = fx
    cfg0 = dataclasses.replace(
        paper_cfg, loss=dataclasses.replace(paper_cfg.loss, lam=0.0))
    model_tri = paper_run[0]
    model_no, _, _ = train(triplets, stores, cfg0)

    # gallery augmented with each query's own unmodified reference
    aug_ids = stores.gallery.ids + tuple(f"ref::{r.ref_id}" for r in triplets)
    aug_vecs = np.vstack([stores.gallery.vectors,
                          np.stack([stores.images.lookup(r.ref_id)
                                    for r in triplets])])
    gallery = Gallery(EmbeddingStore(aug_ids, aug_vecs, True))

    def frac_target_above_reference(model):
        q = fused_queries(model, triplets, stores)
        wins = 0
        for i, rec in enumerate(triplets):
            scores = gallery.vectors @ q[i]
            ranked = sorted(zip(gallery.ids, scores.tolist()),
                            key=lambda p: (-p[1], p[0]))
            pos = {id_: j for j, (id_, _) in enumerate(ranked)}
            if pos[rec.target_ids[0]] < pos[f"ref::{rec.ref_id}"]:
                wins += 1
        return wins / len(triplets)

    f_tri = frac_target_above_reference(model_tri)
    f_no = frac_target_above_reference(model_no)
    verdict("criterion-6 triplet-loss-effect", f_tri > f_no,
            f"target-above-reference fraction: lambda=0.2 -> {f_tri:.3f}, "
            f"lambda=0 -> {f_no:.3f}")


def test_criterion_7_positive_cosine_shift(fx, paper_cfg, paper_run):
    triplets, stores = fx
    trained = paper_run[0]
    untrained = VaGFeMModel.create(paper_cfg.fusion, seed=paper_cfg.seed)
    targets = np.stack([stores.gallery.lookup(r.target_ids[0])
                        for r in triplets])

    def hist(model):
        q = fused_queries(model, triplets, stores)
        return cosine_histogram(list(zip(q, targets)))

    h_tr, h_un = hist(trained), hist(untrained)
    conserve = (int(h_tr.counts.sum()) == len(triplets)
                and int(h_un.counts.sum()) == len(triplets))
    delta = h_tr.mean - h_un.mean
    verdict("criterion-7 positive-cosine-shift", delta >= 0.2 and conserve,
            f"mean cos {h_un.mean:.3f} -> {h_tr.mean:.3f} "
            f"(delta {delta:.3f}), counts conserved={conserve}")


def test_criterion_8_determinism_persistence(fx, tmp_path):
    triplets, stores = fx
    cfg = TrainConfig(fusion=SMALL, batch_size=32, epochs=2, seed=0)

    ck_bytes, reports = [], []
    for run in range(2):
        model, state, _ = train(triplets, stores, cfg)
        path = tmp_path / f"run{run}.fgck"
        save_checkpoint(Checkpoint.from_run(model, state, 0, cfg), path)
        ck_bytes.append(path.read_bytes())
        reports.append(evaluate(triplets, model, stores).to_json())
    same_ok = ck_bytes[0] == ck_bytes[1] and reports[0] == reports[1]

    loaded = load_checkpoint(tmp_path / "run0.fgck")
    round_ok = all(loaded.params[n].tobytes() == p.data.tobytes()
                   for n, p in model.params.items())

    cfg1 = dataclasses.replace(cfg, epochs=1)
    m_half, s_half, _ = train(triplets, stores, cfg1)
    half = tmp_path / "half.fgck"
    save_checkpoint(Checkpoint.from_run(m_half, s_half, 0, cfg1), half)
    m_res, s_res, _ = train(triplets, stores, cfg,
                            resume_from=load_checkpoint(half))
    resume_ok = (s_res.step == state.step and all(
        m_res.params[n].data.tobytes() == p.data.tobytes()
        for n, p in model.params.items()))

    sp = tmp_path / "store.fige"
    write_store(stores.gallery.vectors, stores.gallery.ids, True, sp)
    back = read_store(sp)
    sp2 = tmp_path / "store2.fige"
    write_store(back.vectors, back.ids, True, sp2)
    store_ok = (back.vectors.tobytes() == stores.gallery.vectors.tobytes()
                and sp.read_bytes() == sp2.read_bytes())

    verdict("criterion-8 determinism-persistence",
            same_ok and round_ok and resume_ok and store_ok,
            f"same-seed={same_ok} roundtrip={round_ok} resume={resume_ok} "
            f"store={store_ok}")


def test_criterion_9_dataset_tooling(fx):
    pairs = [ScoredPair("a", "x", 0.95), ScoredPair("b", "y", 0.90),
             ScoredPair("c", "z", 0.85)]
    kept = clip_filter(pairs, 0.9)
    filt_ok = [p.image_id for p in kept] == ["a"]

    triplets, _ = fx
    stats = dataset_stats(triplets)
    recount = {}
    for task in ("CIR", "SBIR", "CSTBIR"):
        recs = [r for r in triplets if r.task == task]
        lens = [len(r.text.split()) for r in recs if r.text is not None]
        recount[task] = (len(recs),
                         sum(lens) / len(lens) if lens else None)
    stats_ok = all(
        stats[t]["count"] == recount[t][0]
        and stats[t]["mean_text_word_count"] == recount[t][1]
        for t in recount) and stats["total"]["count"] == 256

    verdict("criterion-9 dataset-tooling", filt_ok and stats_ok,
            f"strict-0.9-filter={filt_ok} per-task-stats={stats_ok}")
