"""Interaction/feature loading, per-user splits, the item-item kNN graph and
the planted-structure synthetic generator."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

MODALITIES = ("mm", "t", "v")
DEFAULT_DIMS = {"mm": 768, "t": 384, "v": 4096}


class DataError(Exception):
    """Malformed or inconsistent input data."""


class ConfigError(ValueError):
    """Invalid configuration values."""


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    num_users: int
    num_items: int
    edges: np.ndarray  # (E, 2) int64, lexicographically sorted
    duplicates_dropped: int = 0
    user_tokens: tuple[str, ...] | None = None
    item_tokens: tuple[str, ...] | None = None

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            if e.min() < 0 or e[:, 0].max() >= self.num_users or e[:, 1].max() >= self.num_items:
                raise DataError("edge index out of range")
            order = np.lexsort((e[:, 1], e[:, 0]))
            e = e[order]
            if np.any(np.all(e[1:] == e[:-1], axis=1)):
                raise DataError("duplicate (user, item) pair")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @classmethod
    def from_pairs(cls, num_users: int, num_items: int, pairs, **kw) -> "InteractionDataset":
        return cls(num_users, num_items, np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2), **kw)

    def __len__(self) -> int:
        return len(self.edges)

    @property
    def per_user_items(self) -> list[np.ndarray]:
        return self._index("_per_user", 0, 1, self.num_users)

    @property
    def per_item_users(self) -> list[np.ndarray]:
        return self._index("_per_item", 1, 0, self.num_items)

    def _index(self, attr, key_col, val_col, n):
        cached = self.__dict__.get(attr)
        if cached is None:
            order = np.lexsort((self.edges[:, val_col], self.edges[:, key_col]))
            keys = self.edges[order, key_col]
            vals = self.edges[order, val_col]
            bounds = np.searchsorted(keys, np.arange(n + 1))
            cached = [vals[bounds[k]:bounds[k + 1]] for k in range(n)]
            object.__setattr__(self, attr, cached)
        return cached

    def item_sets(self) -> list[set[int]]:
        return [set(map(int, items)) for items in self.per_user_items]

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.edges))
        return sp.csr_matrix((data, (self.edges[:, 0], self.edges[:, 1])),
                             shape=(self.num_users, self.num_items))

    def to_tsv(self) -> str:
        return "".join(f"{u}\t{i}\n" for u, i in self.edges)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.num_users, self.num_items], dtype="<i8").tobytes())
        h.update(self.edges.astype("<i8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: InteractionDataset
    validation: InteractionDataset
    test: InteractionDataset
    seed: int = 0

    def __getitem__(self, name: str) -> InteractionDataset:
        return {"train": self.train, "val": self.validation, "validation": self.validation,
                "test": self.test}[name]

    def fingerprint(self) -> str:
        return hashlib.sha256("".join(
            p.fingerprint() for p in (self.train, self.validation, self.test)).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class FeatureBank:
    matrices: Mapping[str, np.ndarray]

    def __post_init__(self):
        frozen = {}
        rows = None
        for m, mat in self.matrices.items():
            arr = np.array(mat, dtype=np.float64)
            if arr.ndim != 2:
                raise DataError(f"feature matrix {m!r} must be 2-d, got shape {arr.shape}")
            if rows is None:
                rows = arr.shape[0]
            elif arr.shape[0] != rows:
                raise DataError(f"feature matrix {m!r} has {arr.shape[0]} rows, expected {rows}")
            zero = np.flatnonzero(~arr.any(axis=1))
            if zero.size:
                raise DataError(f"feature matrix {m!r} has an all-zero row at index {int(zero[0])}")
            arr.setflags(write=False)
            frozen[m] = arr
        object.__setattr__(self, "matrices", frozen)

    def __getitem__(self, m: str) -> np.ndarray:
        return self.matrices[m]

    @property
    def num_items(self) -> int:
        return next(iter(self.matrices.values())).shape[0]

    @property
    def dims(self) -> dict[str, int]:
        return {m: a.shape[1] for m, a in self.matrices.items()}


@dataclass(frozen=True, eq=False)
class SimilarityGraph:
    matrix: sp.csr_matrix
    k_sim: int
    normalization: str

    @property
    def shape(self):
        return self.matrix.shape

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


# ---------------------------------------------------------------- interactions

def load_interactions(path, format: str = "tsv") -> InteractionDataset:  # noqa: A002
    if format != "tsv":
        raise ConfigError(f"unsupported interaction format {format!r}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"interaction file not found: {path}")
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    pairs = []
    dups = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < 2 or not cols[0] or not cols[1]:
                raise DataError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            u = users.setdefault(cols[0], len(users))
            i = items.setdefault(cols[1], len(items))
            if (u, i) in seen:
                dups += 1
                continue
            seen.add((u, i))
            pairs.append((u, i))
    if not pairs:
        raise DataError(f"{path}: no interactions")
    if dups:
        log.info("%s: dropped %d duplicate interactions", path, dups)
    return InteractionDataset.from_pairs(
        len(users), len(items), pairs, duplicates_dropped=dups,
        user_tokens=tuple(users), item_tokens=tuple(items))


def save_interactions(ds: InteractionDataset, path) -> None:
    Path(path).write_text(ds.to_tsv(), encoding="utf-8")


def split_counts(n: int, ratios=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    # users with >= 3 edges get at least one val and one test edge; fractions round toward train
    if n < 3:
        return n, 0, 0
    n_val = int(np.floor(ratios[1] * n + 1e-9))
    n_test = int(np.floor(ratios[2] * n + 1e-9))
    if ratios[1] > 0:
        n_val = max(1, n_val)
    if ratios[2] > 0:
        n_test = max(1, n_test)
    return n - n_val - n_test, n_val, n_test


def split_dataset(ds: InteractionDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitDataset:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.Generator(np.random.PCG64(seed))
    parts: list[list[tuple[int, int]]] = [[], [], []]
    for u, items in enumerate(ds.per_user_items):
        if len(items) == 0:
            raise DataError(f"user {u} has no interactions")
        perm = items[rng.permutation(len(items))]
        n_tr, n_va, _ = split_counts(len(items), ratios)
        for k, chunk in enumerate((perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:])):
            parts[k].extend((u, int(i)) for i in chunk)
    views = [InteractionDataset.from_pairs(ds.num_users, ds.num_items, p) for p in parts]
    return SplitDataset(*views, seed=seed)


# ---------------------------------------------------------------- features

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_features(matrix, path, modality: str) -> Path:
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    path.write_bytes(arr.tobytes(order="C"))
    _sidecar(path).write_text(json.dumps(
        {"rows": int(arr.shape[0]), "cols": int(arr.shape[1]), "modality": modality}, sort_keys=True) + "\n")
    return path


def load_features(path, expected_items: int | None = None) -> np.ndarray:
    path = Path(path)
    side = _sidecar(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    if not side.exists():
        raise DataError(f"feature descriptor not found: {side}")
    try:
        desc = json.loads(side.read_text())
        rows, cols = int(desc["rows"]), int(desc["cols"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"bad feature descriptor {side}: {exc}") from exc
    raw = path.read_bytes()
    if len(raw) != rows * cols * 4:
        raise DataError(f"{path}: shape mismatch, descriptor expects {rows}x{cols} "
                        f"({rows * cols * 4} bytes), found {len(raw)} bytes")
    if expected_items is not None and rows != expected_items:
        raise DataError(f"{path}: expected {expected_items} rows, found {rows}")
    mat = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(mat).all(axis=1))
    if bad.size:
        raise DataError(f"{path}: non-finite value in row {int(bad[0])}")
    mat.setflags(write=False)
    return mat


# ---------------------------------------------------------------- similarity graph

def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(n == 0)
    if zero.size:
        raise DataError(f"zero-norm feature row {int(zero[0])}")
    return x / n[:, None]


def knn_indices(x: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Top-``k`` cosine neighbours (self excluded), ties to the lower index."""
    unit = _unit_rows(np.asarray(x, dtype=np.float64))
    n = unit.shape[0]
    if not 1 <= k < n:
        raise ConfigError(f"k={k} must satisfy 1 <= k < {n}")
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        sim = unit[lo:hi] @ unit.T
        sim[np.arange(hi - lo), np.arange(lo, hi)] = -np.inf
        out[lo:hi] = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return out


def build_similarity_graph(features, k_sim: int = 10, normalization: str = "row") -> SimilarityGraph:
    if normalization not in ("row", "symmetric"):
        raise ConfigError(f"unknown normalization {normalization!r}")
    features = np.asarray(features)
    n = features.shape[0]
    if k_sim < 1 or n < k_sim + 1:
        raise ConfigError(f"k_sim={k_sim} needs at least {k_sim + 1} items, got {n}")
    nbrs = knn_indices(features, k_sim)
    adj = sp.csr_matrix((np.ones(n * k_sim), (np.repeat(np.arange(n), k_sim), nbrs.ravel())), shape=(n, n))
    deg_row = np.asarray(adj.sum(axis=1)).ravel()
    if normalization == "row":
        s = sp.diags(1.0 / deg_row) @ adj
    else:
        deg_col = np.asarray(adj.sum(axis=0)).ravel()
        inv_col = np.zeros(n)
        nz = deg_col > 0
        inv_col[nz] = deg_col[nz] ** -0.5
        s = sp.diags(deg_row ** -0.5) @ adj @ sp.diags(inv_col)
    s = sp.csr_matrix(s)
    s.sort_indices()
    return SimilarityGraph(s, k_sim, normalization)


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    num_users: int = 500
    num_items: int = 200
    num_blocks: int = 8
    p_in: float = 0.3
    p_out: float = 0.005
    dims: dict = field(default_factory=lambda: {"mm": 48, "t": 32, "v": 64})
    clusters: dict = field(default_factory=lambda: {"mm": 8, "t": 8, "v": 8})
    noise: float = 0.3

    def validate(self) -> None:
        if self.num_users < 1 or self.num_items < 2 or self.num_blocks < 1:
            raise ConfigError("synthetic spec needs num_users >= 1, num_items >= 2, num_blocks >= 1")
        if not (0.0 <= self.p_out < self.p_in <= 1.0):
            raise ConfigError(f"need 0 <= p_out < p_in <= 1, got p_in={self.p_in}, p_out={self.p_out}")
        if set(self.dims) != set(self.clusters):
            raise ConfigError("dims and clusters must name the same modalities")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


@dataclass(frozen=True)
class SyntheticTruth:
    user_blocks: np.ndarray
    item_blocks: np.ndarray
    clusters: dict


def _balanced(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def generate_synthetic(spec: SyntheticSpec, seed: int = 0, return_truth: bool = False):
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    ub = _balanced(spec.num_users, spec.num_blocks, rng)
    ib = _balanced(spec.num_items, spec.num_blocks, rng)
    same = ub[:, None] == ib[None, :]
    prob = np.where(same, spec.p_in, spec.p_out)
    hit = rng.random((spec.num_users, spec.num_items)) < prob
    for u in np.flatnonzero(~hit.any(axis=1)):
        # keep every user rankable: one in-block (or any) item
        pool = np.flatnonzero(same[u]) if same[u].any() else np.arange(spec.num_items)
        hit[u, rng.choice(pool)] = True
    users, items = np.nonzero(hit)
    ds = InteractionDataset(spec.num_users, spec.num_items, np.stack([users, items], axis=1))

    mats, clusters = {}, {}
    for m in sorted(spec.dims):
        assign = _balanced(spec.num_items, spec.clusters[m], rng)
        centroids = rng.standard_normal((spec.clusters[m], spec.dims[m]))
        noise = rng.standard_normal((spec.num_items, spec.dims[m]))
        mats[m] = centroids[assign] + spec.noise * noise
        clusters[m] = assign
    bank = FeatureBank(mats)
    if return_truth:
        return ds, bank, SyntheticTruth(ub, ib, clusters)
    return ds, bank


def write_synthetic(spec: SyntheticSpec, seed: int, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, bank = generate_synthetic(spec, seed)
    paths = {"interactions": out / "interactions.tsv"}
    paths["interactions"].write_text("".join(f"u{u}\ti{i}\n" for u, i in ds.edges), encoding="utf-8")
    # feature rows follow the loader's first-appearance item order; never-seen items are dropped
    _, first = np.unique(ds.edges[:, 1], return_index=True)
    order = ds.edges[np.sort(first), 1]
    for m, mat in bank.matrices.items():
        paths[m] = write_features(mat[order], out / f"{m}.f32", m)
    return paths
