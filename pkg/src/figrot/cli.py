"""figrot command-line entry point.

Subcommands: gen-synthetic, filter, stats, train, eval, retrieve,
analyze, sweep. All flags are long-form; a JSON --config file supplies
defaults and explicit flags override it. Every output artifact carries
the effective configuration for reproducibility.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import analysis, synth, vagfem
from .embedstore import (EMPTY_TEXT_ID, ScoredPair, Stores, clip_filter,
                         dataset_stats, load_triplets, read_store)
from .evalmetrics import EvalConfig, evaluate
from .losses import LossConfig
from .retrieval import Gallery, ranked_to_jsonl, search_topk
from .trainer import (Checkpoint, TrainConfig, load_checkpoint,
                      save_checkpoint, train)
from .vagfem import FusionConfig, VaGFeMModel

SWEEP_CAPS = ("1000", "2000", "5000", "10000", "all")


def _add_store_flags(p, gallery=True):
    p.add_argument("--images", required=True, help="image/sketch embedding store")
    p.add_argument("--texts", required=True, help="text embedding store")
    if gallery:
        p.add_argument("--gallery", required=True, help="target gallery store")


def _add_model_flags(p):
    p.add_argument("--model-dim", type=int, default=512)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--mask-ratio", type=float, default=0.2)
    p.add_argument("--mode", choices=("vagfem", "baseline"), default="vagfem")


def _add_loss_flags(p):
    p.add_argument("--temperature", type=float, default=0.01)
    p.add_argument("--margin", type=float, default=0.3)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--no-triplet", action="store_true")
    p.add_argument("--negative-source", default="fused_empty_text",
                   choices=("fused_empty_text", "raw_reference"))


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--max-triplets", type=int, default=None)


def _load_stores(args) -> Stores:
    return Stores(images=read_store(args.images),
                  texts=read_store(args.texts),
                  gallery=read_store(args.gallery))


def _fusion_config(args, dim: int) -> FusionConfig:
    return FusionConfig(embed_dim=dim, model_dim=args.model_dim,
                        layers=args.layers, heads=args.heads,
                        head_dim=args.head_dim, mask_ratio=args.mask_ratio)


def _loss_config(args) -> LossConfig:
    return LossConfig(temperature=args.temperature, margin=args.margin,
                      lam=args.lam, triplet_enabled=not args.no_triplet,
                      negative_source=args.negative_source)


def _model_from_args(args, dim: int) -> tuple[VaGFeMModel, FusionConfig, str]:
    """Model from --checkpoint if given, else a fresh seeded model."""
    if getattr(args, "checkpoint", None):
        ckpt = load_checkpoint(args.checkpoint)
        fusion = ckpt.fusion
        if fusion.embed_dim != dim:
            raise ValueError(f"checkpoint embed_dim {fusion.embed_dim} does "
                             f"not match store dim {dim}")
        if args.mask_ratio != fusion.mask_ratio:
            fusion = dataclasses.replace(fusion, mask_ratio=args.mask_ratio)
        model = VaGFeMModel(fusion, ckpt.to_model().params)
        return model, fusion, args.checkpoint
    fusion = _fusion_config(args, dim)
    return VaGFeMModel.create(fusion, seed=args.seed), fusion, "untrained"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args) -> int:
    paths = synth.gen_synthetic(args.n, args.dim, args.seed, args.out)
    print(json.dumps(paths, indent=2, sort_keys=True))
    return 0


def cmd_filter(args) -> int:
    pairs = []
    with open(args.pairs, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                pairs.append(ScoredPair(image_id=obj["image_id"],
                                        text_id=obj["text_id"],
                                        score=float(obj["score"])))
    kept = clip_filter(pairs, args.threshold)
    with open(args.out, "w", encoding="utf-8") as fh:
        for p in kept:
            fh.write(json.dumps({"image_id": p.image_id, "text_id": p.text_id,
                                 "score": p.score}) + "\n")
    print(f"kept {len(kept)} of {len(pairs)} pairs "
          f"(threshold {args.threshold}, strictly above)")
    return 0


def cmd_stats(args) -> int:
    triplets = load_triplets(args.triplets)
    stats = dataset_stats(triplets)
    print(f"{'Class':<8} {'# Triplets':>10} {'Text Length':>12}")
    for task in ("CIR", "SBIR", "CSTBIR", "total"):
        row = stats[task]
        length = ("--" if row["mean_text_word_count"] is None
                  else f"{row['mean_text_word_count']:.2f}")
        print(f"{task:<8} {row['count']:>10} {length:>12}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(stats, fh, indent=2, sort_keys=True)
    return 0


def _run_train(args, triplets, stores) -> tuple:
    fusion = _fusion_config(args, stores.images.dim)
    config = TrainConfig(
        fusion=fusion, loss=_loss_config(args), lr=args.lr,
        weight_decay=args.weight_decay, batch_size=args.batch_size,
        epochs=args.epochs, seed=args.seed, max_triplets=args.max_triplets,
        mode=args.mode)
    model, state, log = train(triplets, stores, config)
    return model, state, log, config


def _write_train_outputs(out_dir, model, state, log, config):
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.fgck")
    save_checkpoint(Checkpoint.from_run(model, state, config.seed, config),
                    ckpt_path)
    log.write_jsonl(os.path.join(out_dir, "trainlog.jsonl"))
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(log.config, fh, indent=2, sort_keys=True)
    return ckpt_path


def cmd_train(args) -> int:
    triplets = load_triplets(args.triplets)
    stores = _load_stores(args)
    model, state, log, config = _run_train(args, triplets, stores)
    ckpt_path = _write_train_outputs(args.out_dir, model, state, log, config)
    means = log.epoch_means()
    print(f"trained {state.step} steps "
          f"(temperature={config.loss.temperature}, "
          f"margin={config.loss.margin}, lambda={config.loss.lam})")
    for epoch, m in means.items():
        print(f"epoch {epoch}: mean total {m['total']:.6f} "
              f"(infonce {m['infonce']:.6f}, triplet {m['triplet']:.6f})")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    triplets = load_triplets(args.triplets)
    stores = _load_stores(args)
    model, fusion, ckpt_id = _model_from_args(args, stores.images.dim)
    config = EvalConfig(mode=args.mode,
                        self_exclude=not args.no_self_exclude,
                        checkpoint_id=ckpt_id)
    report = evaluate(triplets, model, stores, config)
    report.metadata["fusion"] = fusion.to_dict()
    report.metadata["loss"] = _loss_config(args).to_dict()
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "report.json"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    with open(os.path.join(args.out_dir, "report.tsv"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_tsv())
    print(report.to_json())
    return 0


def cmd_retrieve(args) -> int:
    stores = _load_stores(args)
    model, _, _ = _model_from_args(args, stores.images.dim)
    ref = stores.images.lookup(args.ref_id)
    text_id = args.text_id if args.text_id else EMPTY_TEXT_ID
    text = stores.texts.lookup(text_id)
    fused, _ = vagfem.forward(ref[None, :], text[None, :], model,
                              mode=args.mode)
    gallery = Gallery(stores.gallery)
    exclude = args.ref_id if not args.no_self_exclude else None
    ranked = search_topk(fused.data[0], gallery, args.k,
                         exclude_id=exclude, query_key=args.ref_id)
    for id_, score in ranked.items:
        print(json.dumps({"id": id_, "score": score}))
    return 0


def cmd_analyze(args) -> int:
    triplets = load_triplets(args.triplets)
    stores = _load_stores(args)
    model, fusion, ckpt_id = _model_from_args(args, stores.images.dim)
    stores.validate_records(triplets)

    v = stores.ref_rows(triplets).astype(model.dtype)
    t = stores.text_rows(triplets).astype(model.dtype)
    fused, _ = vagfem.forward(v, t, model, mode=args.mode)
    queries = fused.data

    gallery = stores.gallery
    positives = [(queries[i], gallery.lookup(rec.target_ids[0]))
                 for i, rec in enumerate(triplets)]
    negatives = analysis.sample_negative_pairs(
        queries, gallery.vectors, gallery.ids,
        [set(r.target_ids) for r in triplets], seed=args.seed)
    hists = {
        "positive": analysis.cosine_histogram(positives, bins=args.bins),
        "negative": analysis.cosine_histogram(negatives, bins=args.bins),
    }
    profile = analysis.variance_profile(queries)

    batches = [queries[i:i + args.batch_size]
               for i in range(0, len(queries), args.batch_size)]
    k = fusion.mask_k or 1
    stability = (analysis.mask_stability(batches, k).tolist()
                 if len(batches) >= 2 else None)

    os.makedirs(args.out_dir, exist_ok=True)
    out = args.out_dir
    with open(os.path.join(out, "histograms.json"), "w", encoding="utf-8") as fh:
        fh.write(analysis.histograms_to_json(hists) + "\n")
    for label, h in hists.items():
        with open(os.path.join(out, f"hist_{label}.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write(h.to_csv())
    with open(os.path.join(out, "variance_profile.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"profile": profile, "checkpoint": ckpt_id,
                   "fusion": fusion.to_dict()}, fh, indent=2)
    with open(os.path.join(out, "variance_profile.csv"), "w",
              encoding="utf-8") as fh:
        for d, var in profile:
            fh.write(f"{d} {var:.8e}\n")
    with open(os.path.join(out, "mask_stability.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"k": k, "batch_size": args.batch_size,
                   "jaccard": stability}, fh, indent=2)
    print(f"positive cosine mean {hists['positive'].mean:.4f}, "
          f"negative mean {hists['negative'].mean:.4f} "
          f"({hists['positive'].count} pairs)")
    return 0


def cmd_sweep(args) -> int:
    triplets = load_triplets(args.triplets)
    stores = _load_stores(args)
    eval_triplets = (load_triplets(args.eval_triplets)
                     if args.eval_triplets else triplets)
    caps = [c.strip() for c in args.caps.split(",") if c.strip()]
    summary = {}
    for cap in caps:
        cap_args = argparse.Namespace(**vars(args))
        cap_args.max_triplets = None if cap == "all" else int(cap)
        if cap_args.max_triplets is not None and \
                cap_args.max_triplets > len(triplets):
            continue
        model, state, log, config = _run_train(cap_args, triplets, stores)
        out_dir = os.path.join(args.out_dir, f"cap_{cap}")
        _write_train_outputs(out_dir, model, state, log, config)
        report = evaluate(eval_triplets, model, stores,
                          EvalConfig(mode=args.mode,
                                     checkpoint_id=f"cap_{cap}"))
        with open(os.path.join(out_dir, "report.json"), "w",
                  encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        summary[cap] = {
            "used_triplets": log.config["used_triplets"],
            "macro_map100": report.macro_map100,
            "per_task_map100": {task: m["mAP@100"]
                                for task, m in report.per_task.items()},
        }
        print(f"cap {cap}: macro mAP@100 {report.macro_map100:.4f}")
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"config": vars(args) | {"func": None}, "results": summary},
                  fh, indent=2, default=str)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="figrot",
        description="variance-guided fusion training and retrieval evaluation")
    subs = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def sub(name, func, **kw):
        p = subs.add_parser(name, **kw)
        p.add_argument("--config", default=None,
                       help="JSON file of flag defaults")
        p.set_defaults(func=func)
        registry[name] = p
        return p

    p = sub("gen-synthetic", cmd_gen_synthetic,
            help="write a deterministic synthetic fixture")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub("filter", cmd_filter, help="similarity-threshold pair filtering")
    p.add_argument("--pairs", required=True, help="scored pairs JSONL")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--out", required=True)

    p = sub("stats", cmd_stats, help="per-task dataset statistics")
    p.add_argument("--triplets", required=True)
    p.add_argument("--json", default=None)

    p = sub("train", cmd_train, help="train the fusion model")
    p.add_argument("--triplets", required=True)
    _add_store_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    _add_loss_flags(p)
    _add_train_flags(p)

    p = sub("eval", cmd_eval, help="evaluate and write a metric report")
    p.add_argument("--triplets", required=True)
    _add_store_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-self-exclude", action="store_true")
    _add_model_flags(p)
    _add_loss_flags(p)

    p = sub("retrieve", cmd_retrieve, help="ad-hoc top-K for one query")
    _add_store_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--ref-id", required=True)
    p.add_argument("--text-id", default=None)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-self-exclude", action="store_true")
    _add_model_flags(p)

    p = sub("analyze", cmd_analyze,
            help="cosine histograms, variance profile, mask stability")
    p.add_argument("--triplets", required=True)
    _add_store_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    _add_model_flags(p)

    p = sub("sweep", cmd_sweep, help="train/eval at increasing data caps")
    p.add_argument("--triplets", required=True)
    _add_store_flags(p)
    p.add_argument("--eval-triplets", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--caps", default=",".join(SWEEP_CAPS))
    _add_model_flags(p)
    _add_loss_flags(p)
    _add_train_flags(p)

    return parser, registry


def main(argv=None) -> int:
    parser, registry = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            with open(args.config, "r", encoding="utf-8") as fh:
                defaults = json.load(fh)
            registry[args.command].set_defaults(
                **{k.replace("-", "_"): v for k, v in defaults.items()})
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
