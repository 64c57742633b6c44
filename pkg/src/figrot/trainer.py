"""AdamW training loop with deterministic seeding and binary checkpoints.

Checkpoint layout (little-endian): magic "FGCK", version u32 = 1, u32
JSON length + UTF-8 JSON (fusion config, train config echo, step, seed,
record counts), then parameter records (u16 name length, name bytes, u8
rank, u32 dims..., float32 data), then optimizer moment records in the
same layout.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter
from .embedstore import Stores, TripletRecord, TASKS
from .losses import LossConfig, combined_loss
from .vagfem import FusionConfig, VaGFeMModel

CKPT_MAGIC = b"FGCK"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file violates the binary format."""


@dataclass(frozen=True)
class TrainConfig:
    fusion: FusionConfig
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 2
    seed: int = 0
    max_triplets: Optional[int] = None
    mode: str = "vagfem"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr {self.lr} must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "fusion": self.fusion.to_dict(), "loss": self.loss.to_dict(),
            "lr": self.lr, "weight_decay": self.weight_decay,
            "betas": list(self.betas), "adam_epsilon": self.adam_epsilon,
            "batch_size": self.batch_size, "epochs": self.epochs,
            "seed": self.seed, "max_triplets": self.max_triplets,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["fusion"] = FusionConfig.from_dict(d["fusion"])
        d["loss"] = LossConfig.from_dict(d["loss"])
        d["betas"] = tuple(d["betas"])
        return cls(**d)


class AdamWState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def adamw_step(params: Sequence[Parameter], grads: dict[str, np.ndarray],
               state: AdamWState, config: TrainConfig) -> None:
    """Bias-corrected Adam update plus decoupled weight decay, in place."""
    for p in params:
        g = grads[p.name]
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {p.name!r}")
    state.step += 1
    t = state.step
    beta1, beta2 = config.betas
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        g = grads[p.name].astype(p.data.dtype, copy=False)
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[p.name] = m
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        # decay is decoupled from the gradient term
        p.data = (p.data - config.lr * config.weight_decay * p.data
                  - config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_epsilon))


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def epoch_means(self) -> dict[int, dict[str, float]]:
        out: dict[int, dict[str, float]] = {}
        by_epoch: dict[int, list[dict]] = {}
        for s in self.steps:
            by_epoch.setdefault(s["epoch"], []).append(s)
        for epoch, rows in sorted(by_epoch.items()):
            out[epoch] = {
                key: sum(r[key] for r in rows) / len(rows)
                for key in ("infonce", "triplet", "total")
            }
        return out

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.steps:
                fh.write(json.dumps(s) + "\n")


def subsample_triplets(triplets: Sequence[TripletRecord], cap: int,
                       seed: int) -> list[TripletRecord]:
    """Seeded uniform subsample without replacement, stratified by task so
    the cap preserves per-task proportions (largest-remainder rounding)."""
    n = len(triplets)
    if cap >= n:
        return list(triplets)
    rng = np.random.default_rng([int(seed), 2])
    by_task = {task: [i for i, r in enumerate(triplets) if r.task == task]
               for task in TASKS}
    by_task = {t: idx for t, idx in by_task.items() if idx}
    quotas = {t: cap * len(idx) / n for t, idx in by_task.items()}
    counts = {t: int(math.floor(q)) for t, q in quotas.items()}
    short = cap - sum(counts.values())
    for t in sorted(by_task, key=lambda t: (counts[t] - quotas[t], t))[:short]:
        counts[t] += 1
    chosen: list[int] = []
    for t in TASKS:
        if t in by_task:
            idx = np.asarray(by_task[t])
            chosen.extend(rng.choice(idx, size=counts[t], replace=False).tolist())
    return [triplets[i] for i in sorted(chosen)]


def train(
    triplets: Sequence[TripletRecord],
    stores: Stores,
    config: TrainConfig,
    resume_from: Optional["Checkpoint"] = None,
) -> tuple[VaGFeMModel, AdamWState, TrainLog]:
    """Run the full schedule: epochs x ceil(N/batch) steps over a per-epoch
    seeded shuffle (last short batch kept). Deterministic given (config,
    data); resuming from a checkpoint reproduces the uninterrupted run.
    """
    if not triplets:
        raise ValueError("empty dataset")
    stores.validate_records(triplets)

    data = list(triplets)
    if config.max_triplets is not None:
        data = subsample_triplets(data, config.max_triplets, config.seed)

    if resume_from is not None:
        if resume_from.fusion.to_dict() != config.fusion.to_dict():
            raise ValueError("checkpoint fusion config does not match")
        model = resume_from.to_model()
        state = resume_from.to_state()
    else:
        model = VaGFeMModel.create(config.fusion, seed=config.seed)
        state = AdamWState()

    params = model.parameters()
    n = len(data)
    steps_per_epoch = math.ceil(n / config.batch_size)
    log = TrainLog(config=config.to_dict())
    log.config["used_triplets"] = n
    t0 = time.monotonic()

    global_step = 0
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
        for b in range(steps_per_epoch):
            global_step += 1
            if global_step <= state.step:
                continue  # already covered by the resumed checkpoint
            batch_idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            batch = [data[i] for i in batch_idx]
            dc.zero_grads(params)
            breakdown, total = combined_loss(batch, model, stores, config.loss,
                                             mode=config.mode)
            grads = dc.backward(total, params)
            adamw_step(params, grads, state, config)
            log.steps.append({
                "step": state.step, "epoch": epoch,
                "infonce": breakdown.infonce, "triplet": breakdown.triplet,
                "total": breakdown.total,
            })
    log.wall_seconds = time.monotonic() - t0
    return model, state, log


# ---------------------------------------------------------------------------
# checkpoint persistence


@dataclass(frozen=True)
class Checkpoint:
    fusion: FusionConfig
    params: dict[str, np.ndarray]
    moments_m: dict[str, np.ndarray]
    moments_v: dict[str, np.ndarray]
    step: int
    seed: int
    train_config: Optional[dict] = None

    def to_model(self) -> VaGFeMModel:
        return VaGFeMModel(self.fusion, {
            name: Parameter(name, data.copy())
            for name, data in self.params.items()})

    def to_state(self) -> AdamWState:
        state = AdamWState()
        state.step = self.step
        state.m = {k: v.copy() for k, v in self.moments_m.items()}
        state.v = {k: v.copy() for k, v in self.moments_v.items()}
        return state

    @classmethod
    def from_run(cls, model: VaGFeMModel, state: AdamWState, seed: int,
                 train_config: Optional[TrainConfig] = None) -> "Checkpoint":
        return cls(
            fusion=model.config,
            params={n: p.data for n, p in model.params.items()},
            moments_m=dict(state.m),
            moments_v=dict(state.v),
            step=state.step,
            seed=seed,
            train_config=train_config.to_dict() if train_config else None,
        )


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def _read_record(fh) -> tuple[str, np.ndarray]:
    (ln,) = struct.unpack("<H", fh.read(2))
    name = fh.read(ln).decode("utf-8")
    (rank,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise CheckpointFormatError(f"truncated data for record {name!r}")
    return name, np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "version": CKPT_VERSION,
        "fusion": ckpt.fusion.to_dict(),
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "param_count": len(ckpt.params),
        "moment_count": len(ckpt.moments_m) + len(ckpt.moments_v),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in sorted(ckpt.params):
            _write_record(fh, name, ckpt.params[name])
        for name in sorted(ckpt.moments_m):
            _write_record(fh, "m:" + name, ckpt.moments_m[name])
        for name in sorted(ckpt.moments_v):
            _write_record(fh, "v:" + name, ckpt.moments_v[name])


def load_checkpoint(path, expect_config: Optional[FusionConfig] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise CheckpointFormatError("bad checkpoint magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(blob_len).decode("utf-8"))
        fusion = FusionConfig.from_dict(meta["fusion"])
        params = {}
        for _ in range(meta["param_count"]):
            name, arr = _read_record(fh)
            params[name] = arr
        moments_m: dict[str, np.ndarray] = {}
        moments_v: dict[str, np.ndarray] = {}
        for _ in range(meta["moment_count"]):
            name, arr = _read_record(fh)
            (moments_m if name.startswith("m:") else moments_v)[name[2:]] = arr

    reference = VaGFeMModel.create(fusion, seed=0)
    expected_shapes = {n: p.data.shape for n, p in reference.params.items()}
    if set(params) != set(expected_shapes):
        raise CheckpointFormatError("parameter set does not match fusion config")
    for name, arr in params.items():
        if arr.shape != expected_shapes[name]:
            raise CheckpointFormatError(
                f"shape mismatch for {name!r}: {arr.shape} vs "
                f"{expected_shapes[name]}")
    if expect_config is not None and fusion.to_dict() != expect_config.to_dict():
        raise CheckpointFormatError(
            "checkpoint fusion config does not match the requested config")
    return Checkpoint(
        fusion=fusion, params=params, moments_m=moments_m, moments_v=moments_v,
        step=meta["step"], seed=meta["seed"],
        train_config=meta.get("train_config"))
