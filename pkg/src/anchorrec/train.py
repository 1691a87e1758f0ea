"""BPR mini-batch training with Adam, early stopping on validation recall,
binary checkpoints and multi-seed runs."""
from __future__ import annotations

import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import compute as C
from .config import RunConfig, replace
from .eval import full_rank
from .ingest import (FeatureBank, InteractionDataset, SplitDataset, build_similarity_graph,
                     generate_synthetic, load_features, load_interactions, split_dataset, DataError)
from .losses import LossBreakdown, total_loss
from .model import GraphContext, ModelState, build_context, forward, init_state, snapshot

log = logging.getLogger(__name__)

MAGIC = b"ANCR"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- data

@dataclass
class PreparedData:
    split: SplitDataset
    features: FeatureBank
    ctx: GraphContext
    meta: dict = field(default_factory=dict)


def prepare_data(cfg: RunConfig) -> PreparedData:
    dc = cfg.data
    if dc.source == "synthetic":
        ds, bank = generate_synthetic(cfg.synth, dc.synth_seed)
    else:
        if not dc.interactions:
            raise DataError("data.interactions is not set")
        ds = load_interactions(dc.interactions)
        missing = [m for m in ("mm", "t", "v") if m not in dc.features]
        if missing:
            raise DataError(f"data.features lacks modalities: {', '.join(missing)}")
        bank = FeatureBank({m: load_features(dc.features[m], ds.num_items) for m in ("mm", "t", "v")})
    split = split_dataset(ds, tuple(dc.split_ratios), dc.split_seed)
    sim = build_similarity_graph(bank[dc.sim_modality], dc.k_sim, dc.sim_normalization)
    train_users = {int(u) for u in split.train.edges[:, 0]}
    train_items = {int(i) for i in split.train.edges[:, 1]}
    meta = {
        "num_users": ds.num_users, "num_items": ds.num_items, "num_interactions": len(ds),
        "duplicates_dropped": ds.duplicates_dropped,
        "train": len(split.train), "validation": len(split.validation), "test": len(split.test),
        "users_without_train": ds.num_users - len(train_users),
        "items_without_train": ds.num_items - len(train_items),
        "similarity": {"k_sim": sim.k_sim, "normalization": sim.normalization, "modality": dc.sim_modality},
        "split_fingerprint": split.fingerprint(),
    }
    return PreparedData(split, bank, build_context(split.train, bank, sim), meta)


# ---------------------------------------------------------------- sampling

def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 stream ``stream`` spawned from ``SeedSequence(seed)``."""
    child = np.random.SeedSequence(seed).spawn(stream + 1)[stream]
    return np.random.Generator(np.random.PCG64(child))


def sample_bpr_batch(train: InteractionDataset, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """(batch_size', 3) array of (user, positive, negative) triples."""
    n_items = train.num_items
    edges = train.edges
    idx = rng.integers(0, len(edges), size=batch_size)
    users, pos = edges[idx, 0], edges[idx, 1]
    counts = np.bincount(edges[:, 0], minlength=train.num_users)
    full = counts[users] >= n_items
    if full.any():
        warnings.warn(f"skipping {int(full.sum())} triples of users who interacted with every item",
                      RuntimeWarning, stacklevel=2)
        users, pos = users[~full], pos[~full]
    keys = np.sort(edges[:, 0] * n_items + edges[:, 1])

    def seen(u, i):
        k = u * n_items + i
        j = np.searchsorted(keys, k)
        return (j < len(keys)) & (keys[np.minimum(j, len(keys) - 1)] == k)

    neg = rng.integers(0, n_items, size=len(users))
    bad = seen(users, neg)
    while bad.any():
        neg[bad] = rng.integers(0, n_items, size=int(bad.sum()))
        bad = seen(users, neg)
    return np.stack([users, pos, neg], axis=1)


# ---------------------------------------------------------------- optimiser

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float,
              beta1: float, beta2: float, eps: float, t: int):
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, C.Tensor]) -> None:
        self.t += 1
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            p.data, self.m[name], self.v[name] = adam_step(
                p.data, g, m, v, self.lr, self.beta1, self.beta2, self.eps, self.t)


# ---------------------------------------------------------------- epochs

def train_epoch(state: ModelState, data: PreparedData, cfg: RunConfig, opt: Adam,
                rng: np.random.Generator) -> LossBreakdown:
    train = data.split.train
    n_batches = math.ceil(len(train) / cfg.train.batch_size)
    params = state.parameters()
    sums = np.zeros(5)
    for b in range(n_batches):
        batch = sample_bpr_batch(train, cfg.train.batch_size, rng)
        items = np.unique(batch[:, 1:])
        local = np.searchsorted(items, batch[:, 1:])
        state.zero_grad()
        try:
            with C.Tape() as tape:
                art = forward(state, data.ctx, items)
                loss, parts = total_loss(art, batch, local, state, data.features, cfg.model, cfg.losses)
        except C.NonFiniteError as exc:
            raise TrainingError(f"non-finite value in batch {b}: {exc}") from exc
        tape.backward(loss)
        opt.step(params)
        sums += [parts.interaction, parts.aal, parts.amp, parts.reg, parts.total]
    return LossBreakdown(*(sums / n_batches).tolist())


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    epoch: int
    seed: int
    config_hash: str
    config: dict

    def restore(self, ctx: GraphContext, cfg: RunConfig | None = None) -> ModelState:
        from .config import from_dict

        run_cfg = cfg if cfg is not None else from_dict(self.config)
        state = init_state(ctx, run_cfg.model, 0)
        try:
            state.load_arrays(self.params)
        except (KeyError, C.ShapeError) as exc:
            raise CheckpointError(f"checkpoint does not fit the model: {exc}") from exc
        return state


def capture(state: ModelState, opt: Adam, epoch: int, cfg: RunConfig) -> Checkpoint:
    return Checkpoint(state.state_arrays(),
                      {k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()},
                      opt.t, epoch, cfg.train.seed, cfg.hash(), cfg.to_dict())


def _blob(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    meta = json.dumps({"epoch": ck.epoch, "seed": ck.seed, "step": ck.step, "config": ck.config},
                      sort_keys=True).encode()
    blobs = [("param/" + k, v) for k, v in sorted(ck.params.items())]
    blobs += [("adam.m/" + k, v) for k, v in sorted(ck.adam_m.items())]
    blobs += [("adam.v/" + k, v) for k, v in sorted(ck.adam_v.items())]
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), bytes.fromhex(ck.config_hash),
           struct.pack("<I", len(meta)), meta, struct.pack("<I", len(blobs))]
    out += [_blob(k, v) for k, v in blobs]
    path.write_bytes(b"".join(out))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if raw[:4] != MAGIC:
            raise CheckpointError(f"{path}: not an ANCR checkpoint")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        chash = raw[8:40].hex()
        pos = 40
        (mlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        meta = json.loads(raw[pos:pos + mlen])
        pos += mlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam.m": {}, "adam.v": {}}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(raw):
                raise CheckpointError(f"{path}: truncated blob {name!r}")
            arr = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
            kind, _, key = name.partition("/")
            groups[kind][key] = arr
        if pos != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return Checkpoint(groups["param"], groups["adam.m"], groups["adam.v"], meta["step"], meta["epoch"],
                      meta["seed"], chash, meta["config"])


# ---------------------------------------------------------------- fit

@dataclass
class FitResult:
    best: Checkpoint
    log: list[dict]
    best_metrics: dict[str, float]
    best_epoch: int
    final_state: ModelState
    stopped_epoch: int


def validation_metrics(state: ModelState, data: PreparedData, cfg: RunConfig) -> dict[str, float]:
    return full_rank(snapshot(state, data.ctx), data.split, cfg.eval.cutoffs, which="val").metrics


def fit(cfg: RunConfig, data: PreparedData,
        evaluate: Callable[[ModelState, int], dict[str, float]] | None = None) -> FitResult:
    tc = cfg.train
    state = init_state(data.ctx, cfg.model, make_rng(tc.seed, 0))
    rng = make_rng(tc.seed, 1)
    opt = Adam(tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    if evaluate is None:
        evaluate = lambda st, ep: validation_metrics(st, data, cfg)  # noqa: E731
    has_val = len(data.split.validation) > 0
    if not has_val:
        warnings.warn("empty validation split: training for epochs_max without early stopping",
                      RuntimeWarning, stacklevel=2)
    key = cfg.eval.select_metric

    records: list[dict] = []
    best, best_metrics, best_epoch, best_value = None, {}, 0, -np.inf
    stale = 0
    epoch = 0
    for epoch in range(1, tc.epochs_max + 1):
        parts = train_epoch(state, data, cfg, opt, rng)
        records.append({"type": "epoch", "epoch": epoch, **parts.as_dict()})
        if not has_val or (epoch % tc.eval_every and epoch != tc.epochs_max):
            continue
        metrics = evaluate(state, epoch)
        records.append({"type": "eval", "epoch": epoch, **metrics})
        if metrics[key] > best_value:
            best_value, best_metrics, best_epoch = metrics[key], dict(metrics), epoch
            best = capture(state, opt, epoch, cfg)
            stale = 0
        else:
            stale += 1
            if tc.early_stopping and stale >= tc.patience:
                break
    if best is None:
        best, best_epoch = capture(state, opt, epoch, cfg), epoch
    return FitResult(best, records, best_metrics, best_epoch, state, epoch)


def evaluate_checkpoint(ck: Checkpoint, data: PreparedData, cfg: RunConfig, which: str = "test",
                        cutoffs=None) -> dict[str, float]:
    state = ck.restore(data.ctx, cfg)
    return full_rank(snapshot(state, data.ctx), data.split, cutoffs or cfg.eval.cutoffs, which=which).metrics


def aggregate(rows: list[dict[str, float]]) -> dict[str, dict[str, float]]:
    keys = sorted({k for r in rows for k in r})
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows if k in r], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[k] = {"mean": float(vals.mean()), "std": std}
    return out


@dataclass
class SeedRun:
    seed: int
    fit: FitResult | None
    val: dict[str, float]
    test: dict[str, float]
    error: str | None = None


def run_seeds(cfg: RunConfig, data: PreparedData, seeds=None) -> tuple[list[SeedRun], dict]:
    seeds = list(cfg.train.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    runs = []
    for s in seeds:
        seed_cfg = replace(cfg, train={"seed": int(s)})
        try:
            res = fit(seed_cfg, data)
            test = evaluate_checkpoint(res.best, data, seed_cfg, "test")
            runs.append(SeedRun(int(s), res, res.best_metrics, test))
        except Exception as exc:  # partial report; the failure is recorded
            log.exception("seed %s failed", s)
            runs.append(SeedRun(int(s), None, {}, {}, f"{type(exc).__name__}: {exc}"))
    ok = [r for r in runs if r.error is None]
    summary = {"val": aggregate([r.val for r in ok]), "test": aggregate([r.test for r in ok])}
    return runs, summary
