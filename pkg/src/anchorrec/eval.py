"""Full-ranking metrics and the structural analyses (neighbourhood overlap,
2-hop proximity, neighbour reports, embedding export)."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ingest import InteractionDataset, SplitDataset, knn_indices, write_features
from .model import Snapshot


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("ANCHORREC_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- ranking

def rank_candidates(scores: np.ndarray, exclude=()) -> np.ndarray:
    """Descending order of ``scores`` without ``exclude``; ties -> lower index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    if len(exclude):
        order = order[~np.isin(order, np.asarray(list(exclude), dtype=np.int64))]
    return order


@dataclass
class RankingResult:
    users: np.ndarray
    rankings: list[np.ndarray]  # truncated to ``depth`` items per user
    targets: list[np.ndarray]
    cutoffs: list[int]
    metrics: dict[str, float] = field(default_factory=dict)
    skipped: int = 0
    depth: int | None = None


def _top_depth(scores: np.ndarray, depth: int | None) -> np.ndarray:
    # full stable sort keeps the tie rule exact; rows are at most num_items long
    order = np.argsort(-scores, axis=1, kind="stable")
    return order if depth is None else order[:, :depth]


def full_rank(snap: Snapshot, split: SplitDataset, cutoffs: Sequence[int] = (20,), which: str = "test",
              depth: int | None = None, chunk: int = 512) -> RankingResult:
    cutoffs = sorted({int(n) for n in cutoffs})
    depth = max(cutoffs) if depth is None else depth
    target_ds = split[which]
    train_items = split.train.per_user_items
    targets = target_ds.per_user_items
    users = np.array([u for u in range(target_ds.num_users) if len(targets[u])], dtype=np.int64)
    n_items = snap.items.shape[0]
    keep = np.array([len(train_items[u]) < n_items for u in users], dtype=bool)
    skipped = int((~keep).sum())
    users = users[keep]

    def work(lo: int) -> list[np.ndarray]:
        batch = users[lo:lo + chunk]
        scores = snap.users[batch] @ snap.items.T
        for r, u in enumerate(batch):
            scores[r, train_items[u]] = -np.inf
        top = _top_depth(scores, depth)
        out = []
        for r, u in enumerate(batch):
            n_cand = n_items - len(train_items[u])
            out.append(top[r, :min(depth, n_cand)])
        return out

    starts = list(range(0, len(users), chunk))
    with ThreadPoolExecutor(max_workers=eval_threads()) as pool:
        parts = list(pool.map(work, starts))
    rankings = [r for part in parts for r in part]
    tgt = [targets[u] for u in users]
    res = RankingResult(users, rankings, tgt, cutoffs, skipped=skipped, depth=depth)
    for n in cutoffs:
        res.metrics[f"recall@{n}"] = recall_at_n(rankings, tgt, n)
        res.metrics[f"ndcg@{n}"] = ndcg_at_n(rankings, tgt, n)
    return res


def _per_user(rankings, test_items, n):
    if n < 1:
        raise ValueError("cutoff must be >= 1")
    for ranking, test in zip(rankings, test_items):
        test = set(int(t) for t in test)
        if test:
            yield np.asarray(ranking)[:n], test


def recall_at_n(rankings, test_items, n: int) -> float:
    vals = [sum(int(i) in test for i in top) / len(test) for top, test in _per_user(rankings, test_items, n)]
    return float(np.mean(vals)) if vals else 0.0


def ndcg_at_n(rankings, test_items, n: int) -> float:
    vals = []
    for top, test in _per_user(rankings, test_items, n):
        gains = np.array([1.0 if int(i) in test else 0.0 for i in top])
        dcg = float(np.sum(gains / np.log2(np.arange(2, len(gains) + 2))))
        idcg = float(np.sum(1.0 / np.log2(np.arange(2, min(n, len(test)) + 2))))
        vals.append(dcg / idcg)
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------- neighbourhoods

def topk_neighbors(emb: np.ndarray, k: int) -> np.ndarray:
    """(num_items, k) cosine neighbours, self excluded, ties to the lower index."""
    emb = np.asarray(emb, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"zero-norm embedding row {int(zero[0])}")
    return knn_indices(emb, k)


@dataclass
class OverlapMatrix:
    labels: list[str]
    values: np.ndarray
    k: int

    def to_json(self, **extra) -> str:
        body = {"k": self.k, "labels": self.labels, "values": self.values.tolist(), **extra}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = ["," + ",".join(self.labels)]
        for lab, row in zip(self.labels, self.values):
            lines.append(lab + "," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def neighbor_overlap(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over items of |N_a(i) & N_b(i)| / K for two (n, K) index arrays."""
    k = a.shape[1]
    hits = [len(np.intersect1d(x, y, assume_unique=True)) for x, y in zip(a, b)]
    return float(np.mean(hits)) / k


def overlap_matrix(spaces: Mapping[str, np.ndarray], k: int = 10) -> OverlapMatrix:
    labels = list(spaces)
    n = {spaces[s].shape[0] for s in labels}
    if len(n) != 1:
        raise ValueError(f"embedding spaces disagree on item count: {sorted(n)}")
    nbrs = {s: topk_neighbors(spaces[s], k) for s in labels}
    m = len(labels)
    vals = np.eye(m)
    for a in range(m):
        for b in range(a + 1, m):
            vals[a, b] = vals[b, a] = neighbor_overlap(nbrs[labels[a]], nbrs[labels[b]])
    return OverlapMatrix(labels, vals, k)


FIGURE_SPACES = [f"{kind}-{m}" for kind in ("raw", "origin", "proj") for m in ("mm", "t", "v")]


def snapshot_overlap(snap: Snapshot, k: int = 10, labels: Sequence[str] = FIGURE_SPACES) -> OverlapMatrix:
    return overlap_matrix({s: snap.space(s) for s in labels}, k)


def two_hop_proximity(i: int, j: int, train: InteractionDataset) -> int:
    """Number of users who interacted with both ``i`` and ``j``."""
    users = train.per_item_users
    for x in (i, j):
        if not 0 <= x < train.num_items:
            raise IndexError(f"item {x} out of range")
    return int(len(np.intersect1d(users[i], users[j], assume_unique=True)))


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def neighbor_report(snap: Snapshot, target: int, k: int = 3) -> list[dict]:
    n = snap.items.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target item {target} out of range [0, {n})")
    unit = snap.items / np.linalg.norm(snap.items, axis=1, keepdims=True)
    sims = unit @ unit[target]
    sims[target] = -np.inf
    order = np.argsort(-sims, kind="stable")[:k]
    ft, fv = snap.features["t"], snap.features["v"]
    return [{
        "item": int(j),
        "fused_cosine": float(sims[j]),
        "two_hop": two_hop_proximity(target, int(j), snap.train),
        "text_cosine": _cos(ft[target], ft[j]),
        "vision_cosine": _cos(fv[target], fv[j]),
    } for j in order]


def export_embeddings(snap: Snapshot, which: Sequence[str], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in which:
        mat = snap.space(name)
        written.append(write_features(mat, out / f"{name}.f32", name))
    return written
