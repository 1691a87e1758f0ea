"""Training objectives: BPR, InfoNCE-based anchor alignment (AAL), modality
structure preservation (AMP), and the direct-alignment baselines."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import compute as C
from .compute import Tensor
from .config import LossConfig, ModelConfig
from .model import mix_projection

MODALITIES = ("mm", "t", "v")


@dataclass
class LossBreakdown:
    interaction: float = 0.0
    aal: float = 0.0  # holds the direct-alignment loss in direct_* modes
    amp: float = 0.0
    reg: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def bpr_loss(scores_pos: Tensor, scores_neg: Tensor) -> Tensor:
    """mean(-log sigmoid(pos - neg)), written as mean(softplus(neg - pos))."""
    if scores_pos.shape != scores_neg.shape or scores_pos.data.size < 1:
        raise C.ShapeError("bpr_loss: need two equal-length, non-empty score vectors")
    return C.mean(C.softplus(scores_neg - scores_pos))


def info_nce(anchors: Tensor, candidates: Tensor, tau: float) -> Tensor:
    """In-batch InfoNCE with cosine logits; row ``i`` of ``candidates`` is
    the positive for anchor ``i`` and every other row a negative."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if anchors.shape != candidates.shape:
        raise C.ShapeError(f"info_nce: {anchors.shape} vs {candidates.shape}")
    logits = C.scale(C.cosine_matrix(anchors, candidates), 1.0 / tau)
    return C.mean(C.logsumexp_rows(logits) - C.diagonal(logits))


def aal_loss(p_mm: Tensor, p_id: Tensor, p_t: Tensor, p_v: Tensor, alpha: float, tau: float) -> Tensor:
    return info_nce(p_mm, p_id, tau) + info_nce(p_mm, mix_projection(p_t, p_v, alpha), tau)


def raw_pair_cosines(f: np.ndarray) -> np.ndarray:
    unit = f / np.linalg.norm(f, axis=1, keepdims=True)
    return (unit @ unit.T)[np.triu_indices(len(f), k=1)]


def amp_loss(h: Mapping[str, Tensor], f: Mapping[str, np.ndarray], lambda_m: Mapping[str, float]) -> Tensor:
    """Sum over modalities of lambda_m * ||C(h_i, h_j) - C(f_i, f_j)||_2 over
    all unordered in-batch pairs."""
    b = next(iter(h.values())).shape[0]
    if b < 2:
        warnings.warn("amp_loss: fewer than two items in batch, no pairs", RuntimeWarning, stacklevel=2)
        return C.tensor(0.0)
    total = None
    for m in MODALITIES:
        w = float(lambda_m.get(m, 0.0))
        if m not in h or w == 0.0:
            continue
        learned = C.upper_triangle(C.cosine_matrix(h[m]))
        term = C.scale(C.norm(learned - C.constant(raw_pair_cosines(np.asarray(f[m])))), w)
        total = term if total is None else total + term
    return C.tensor(0.0) if total is None else total


def anchor_loss(aal: Tensor, amp: Tensor, lambda1: float, lambda2: float) -> Tensor:
    return C.scale(aal, lambda1) + C.scale(amp, lambda2)


def direct_alignment_loss(mode: str, h: Mapping[str, Tensor], tau: float) -> Tensor:
    if mode == "direct_similarity":
        b = h["id"].shape[0]
        gap = C.scale(C.sum(C.row_cosine(h["id"], h["mm"]) + C.row_cosine(h["t"], h["v"])), -1.0 / b)
        return gap + 2.0
    if mode == "direct_contrastive":
        return info_nce(h["mm"], h["id"], tau)
    raise ValueError(f"not a direct alignment mode: {mode!r}")


def l2_regularization(params, weight: float) -> Tensor:
    if weight < 0:
        raise ValueError("regularization weight must be >= 0")
    total = None
    for p in params:
        term = C.sum(C.mul(p, p))
        total = term if total is None else total + term
    if total is None:
        return C.tensor(0.0)
    return C.scale(total, 0.5 * weight)


def total_loss(art, batch: np.ndarray, local: np.ndarray, state, features, model_cfg: ModelConfig,
               loss_cfg: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """Full objective for one BPR batch.

    ``batch`` holds (user, pos, neg) triples; ``local`` the same triples'
    item columns re-indexed into ``art.items``.
    """
    users = batch[:, 0]
    hu = C.rows(art.h_users, users)
    s_pos = C.sum(C.mul(hu, C.rows(art.fused, local[:, 0])), axis=1)
    s_neg = C.sum(C.mul(hu, C.rows(art.fused, local[:, 1])), axis=1)
    interaction = bpr_loss(s_pos, s_neg)

    touched_users = np.unique(users)
    reg = l2_regularization(
        [C.rows(state.user_id, touched_users), C.rows(state.item_id, art.items)], loss_cfg.reg)

    mode = model_cfg.alignment_mode
    zero = C.tensor(0.0)
    if mode == "anchor":
        aal = aal_loss(art.p["mm"], art.p["id"], art.p["t"], art.p["v"], model_cfg.alpha, loss_cfg.tau)
        f = {m: features[m][art.items] for m in MODALITIES}
        amp = amp_loss({m: art.h[m] for m in MODALITIES}, f, loss_cfg.lambda_m)
    elif mode in ("direct_similarity", "direct_contrastive"):
        aal, amp = direct_alignment_loss(mode, art.h, loss_cfg.tau), zero
    else:
        aal, amp = zero, zero

    total = interaction + anchor_loss(aal, amp, loss_cfg.lambda1, loss_cfg.lambda2) + reg
    parts = LossBreakdown(float(interaction.data), float(aal.data), float(amp.data), float(reg.data),
                          float(total.data))
    return total, parts
