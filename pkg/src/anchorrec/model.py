"""Representation pipeline: LightGCN ID encoding, collaborative refinement of
frozen modality features, per-modality projection and fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from . import compute as C
from .compute import MLPBlock, Tensor
from .config import ModelConfig
from .ingest import FeatureBank, InteractionDataset, SimilarityGraph

MODALITIES = ("mm", "t", "v")
ALL_MODALITIES = ("id", "mm", "t", "v")


@dataclass
class GraphContext:
    """Constant inputs shared by every forward pass."""

    adj: sp.csr_matrix  # normalised (users + items) bipartite adjacency
    sim: SimilarityGraph
    features: FeatureBank
    train: InteractionDataset

    @property
    def num_users(self) -> int:
        return self.train.num_users

    @property
    def num_items(self) -> int:
        return self.train.num_items


def normalized_adjacency(train: InteractionDataset) -> sp.csr_matrix:
    """D^-1/2 A D^-1/2 over the bipartite graph; isolated nodes get zero rows."""
    nu, ni = train.num_users, train.num_items
    r = train.adjacency()
    a = sp.bmat([[None, r], [r.T, None]], format="csr", dtype=np.float64)
    a.resize((nu + ni, nu + ni))
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    inv[deg > 0] = deg[deg > 0] ** -0.5
    d = sp.diags(inv)
    out = sp.csr_matrix(d @ a @ d)
    out.sort_indices()
    return out


def build_context(train: InteractionDataset, features: FeatureBank, sim: SimilarityGraph) -> GraphContext:
    return GraphContext(normalized_adjacency(train), sim, features, train)


class ModelState:
    """All learnable parameters plus the hyperparameters that shape them."""

    def __init__(self, num_users: int, num_items: int, feature_dims: Mapping[str, int],
                 cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, dp = cfg.d, cfg.d_proj
        hidden = cfg.mlp_hidden or d
        act = cfg.hidden_activation
        self.user_id = Tensor(C.xavier_uniform(num_users, d, rng), requires_grad=True, name="user_id")
        self.item_id = Tensor(C.xavier_uniform(num_items, d, rng), requires_grad=True, name="item_id")
        self.gate_mlp = {m: C.init_mlp([feature_dims[m], hidden, d], [act, "none"], rng) for m in MODALITIES}
        self.proj_mlp = {m: C.init_mlp([d, hidden, dp], [act, "none"], rng) for m in ALL_MODALITIES}
        self.recon_mlp = C.init_mlp([dp, hidden, d], [act, "none"], rng)

    @property
    def num_users(self) -> int:
        return self.user_id.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_id.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {"id.user": self.user_id, "id.item": self.item_id}
        for m in MODALITIES:
            out.update(self.gate_mlp[m].parameters(f"gate.{m}."))
        for m in ALL_MODALITIES:
            out.update(self.proj_mlp[m].parameters(f"proj.{m}."))
        out.update(self.recon_mlp.parameters("recon."))
        return out

    def groups(self) -> dict[str, dict[str, Tensor]]:
        out: dict[str, dict[str, Tensor]] = {}
        for name, p in self.parameters().items():
            out.setdefault(name.split(".")[0], {})[name] = p
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise KeyError(f"missing parameters: {', '.join(missing)}")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise C.ShapeError(f"parameter {k}: expected shape {p.shape}, got {a.shape}")
            p.data = a.copy()

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


def init_state(ctx: GraphContext, cfg: ModelConfig, seed: int | np.random.Generator) -> ModelState:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    return ModelState(ctx.num_users, ctx.num_items, ctx.features.dims, cfg, rng)


# ---------------------------------------------------------------- pipeline stages

def lightgcn_propagate(state: ModelState, adj: sp.spmatrix, layers: int) -> tuple[Tensor, Tensor]:
    if layers < 0:
        raise ValueError("layers must be >= 0")
    e = C.concat_rows([state.user_id, state.item_id])
    acc = e
    for _ in range(layers):
        e = C.sparse_matmul(adj, e)
        acc = acc + e
    out = C.scale(acc, 1.0 / (layers + 1))
    nu = state.num_users
    n = out.shape[0]
    return C.rows(out, np.arange(nu)), C.rows(out, np.arange(nu, n))


def refine_modality(gate: MLPBlock, h_id_items: Tensor, features: np.ndarray, sim: sp.spmatrix,
                    items=None, propagation: str = "neighbors") -> Tensor:
    """Gate ID embeddings with sigmoid(MLP(features)) and smooth over ``sim``.

    Only the rows in ``items`` (all items when ``None``) are produced; the
    gate is evaluated just on the items those rows draw from.
    """
    sim = sp.csr_matrix(sim)
    n = h_id_items.shape[0]
    items = np.arange(n) if items is None else np.asarray(items, dtype=np.int64)
    if propagation == "self_scaled":
        # literal reading: h_m^i = (sum_j S_ij) * h~_m^i
        scale = np.asarray(sim.sum(axis=1)).ravel()[items]
        h_sel = C.rows(h_id_items, items)
        gated = C.mul(h_sel, C.sigmoid(C.mlp_forward(gate, C.constant(features[items]))))
        return C.sparse_matmul(sp.diags(scale), gated)
    if propagation != "neighbors":
        raise ValueError(f"unknown propagation {propagation!r}")
    block = sim[items]
    cols = np.unique(block.indices)
    gated = C.mul(C.rows(h_id_items, cols),
                  C.sigmoid(C.mlp_forward(gate, C.constant(features[cols]))))
    return C.sparse_matmul(block[:, cols], gated)


def project(state: ModelState, h: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {m: C.mlp_forward(state.proj_mlp[m], h[m]) for m in ALL_MODALITIES if m in h}


def mix_projection(p_t: Tensor, p_v: Tensor, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return C.scale(p_t, alpha) + C.scale(p_v, 1.0 - alpha)


def fuse_item(h: Mapping[str, Tensor], p_mm: Tensor | None, recon: MLPBlock | None,
              lambda_recon: float) -> Tensor:
    fused = h["id"] + h["mm"] + h["t"] + h["v"]
    if lambda_recon != 0.0:
        fused = fused + C.scale(C.mlp_forward(recon, p_mm), lambda_recon)
    return fused


def user_repr(h_id_users: Tensor) -> Tensor:
    return h_id_users


def score(h_u: Tensor, h_i: Tensor) -> Tensor:
    """Row-wise inner product of matched user/item rows."""
    return C.sum(C.mul(h_u, h_i), axis=1)


@dataclass
class ForwardArtifacts:
    items: np.ndarray
    h_users: Tensor
    h: dict[str, Tensor]  # origin space, rows follow ``items``
    p: dict[str, Tensor]  # projection domain
    p_mix: Tensor
    fused: Tensor


def forward(state: ModelState, ctx: GraphContext, items=None) -> ForwardArtifacts:
    cfg = state.cfg
    items = np.arange(ctx.num_items) if items is None else np.asarray(items, dtype=np.int64)
    h_users, h_items = lightgcn_propagate(state, ctx.adj, cfg.layers)
    h = {"id": C.rows(h_items, items)}
    for m in MODALITIES:
        h[m] = refine_modality(state.gate_mlp[m], h_items, ctx.features[m], ctx.sim.matrix,
                               items, cfg.propagation)
    p = project(state, h)
    p_mix = mix_projection(p["t"], p["v"], cfg.alpha)
    fused = fuse_item(h, p["mm"], state.recon_mlp, cfg.lambda_recon)
    return ForwardArtifacts(items, user_repr(h_users), h, p, p_mix, fused)


@dataclass
class Snapshot:
    """Immutable numpy copy of every embedding space, for evaluation."""

    users: np.ndarray
    items: np.ndarray  # fused item embeddings
    origin: dict[str, np.ndarray]
    proj: dict[str, np.ndarray]
    features: FeatureBank
    train: InteractionDataset

    def space(self, name: str) -> np.ndarray:
        kind, _, m = name.partition("-")
        if name == "fused":
            return self.items
        if name == "users":
            return self.users
        if kind == "raw":
            return self.features[m]
        if kind == "origin":
            return self.origin[m]
        if kind == "proj":
            return self.proj[m]
        raise KeyError(f"unknown embedding space {name!r}")

    def space_names(self) -> list[str]:
        names = [f"raw-{m}" for m in MODALITIES]
        names += [f"origin-{m}" for m in ALL_MODALITIES] + [f"proj-{m}" for m in ALL_MODALITIES]
        return names + ["fused", "users"]


def snapshot(state: ModelState, ctx: GraphContext) -> Snapshot:
    art = forward(state, ctx)

    def freeze(t: Tensor) -> np.ndarray:
        a = t.data.copy()
        a.setflags(write=False)
        return a

    return Snapshot(freeze(art.h_users), freeze(art.fused),
                    {m: freeze(t) for m, t in art.h.items()},
                    {m: freeze(t) for m, t in art.p.items()},
                    ctx.features, ctx.train)
