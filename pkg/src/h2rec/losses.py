"""Ranking and contrastive training objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class LossReport:
    l_rec: float
    l_ca: float
    l_msg: float
    total: float
    beta: float
    gamma: float


def rec_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean of ``-log sigmoid(s+ - s-)`` over valid (user, position, negative) triples.

    ``pos_scores`` is ``(...)`` and ``neg_scores`` is ``(..., n_neg)``.
    """
    terms = F.softplus(neg_scores - pos_scores[..., None])
    if valid is None:
        return terms.mean()
    w = valid[..., None].to(terms.dtype).expand_as(terms)
    return (terms * w).sum() / w.sum().clamp_min(1.0)


def _cos_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.normalize(a, dim=-1, eps=1e-12) @ F.normalize(b, dim=-1, eps=1e-12).T


def pairwise_alignment_loss(e_sid: torch.Tensor, e_hid: torch.Tensor, tau: float) -> torch.Tensor:
    """1-to-1 InfoNCE whose denominator holds only the other items (j != i)."""
    b = e_sid.shape[0]
    if b < 2:
        raise ValueError("pairwise alignment needs at least 2 items")
    if tau <= 0:
        raise ValueError("tau must be positive")
    sim = _cos_matrix(e_sid, e_hid) / tau
    eye = torch.eye(b, dtype=torch.bool, device=sim.device)
    neg = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1)
    return -(sim.diagonal() - neg).mean()


def positive_mask(
    pool: np.ndarray,
    sequences: np.ndarray,
    pad_mask: np.ndarray,
    sids: np.ndarray,
    p: int,
    o: int,
) -> np.ndarray:
    """``(P, P)`` boolean matrix; row ``i`` marks the positive set of ``pool[i]``.

    Members are the anchor itself, pool items sharing the first ``p`` codes,
    and pool items found within ``o`` positions of the anchor in any batch
    sequence.
    """
    pool = np.asarray(pool, dtype=np.int64)
    n = len(pool)
    if p < 1 or p > sids.shape[1]:
        raise ValueError(f"p={p} outside [1, {sids.shape[1]}]")
    if o < 0:
        raise ValueError("o must be non-negative")
    prefix = sids[pool, :p]
    mask = (prefix[:, None, :] == prefix[None, :, :]).all(-1)
    mask |= np.eye(n, dtype=bool)
    if o > 0 and n:
        lookup = np.full(max(int(sequences.max()), int(pool.max())) + 1, -1, dtype=np.int64)
        lookup[pool] = np.arange(n)
        slot = np.where(pad_mask, lookup[sequences], -1)
        t = slot.shape[1]
        for shift in range(1, min(o, t - 1) + 1):
            a, b = slot[:, :-shift].ravel(), slot[:, shift:].ravel()
            ok = (a >= 0) & (b >= 0)
            mask[a[ok], b[ok]] = True
            mask[b[ok], a[ok]] = True
    return mask


def build_positive_set(
    item: int, sequences: np.ndarray, pad_mask: np.ndarray, sids: np.ndarray, p: int, o: int,
    pool: Optional[np.ndarray] = None,
) -> set[int]:
    if pool is None:
        pool = np.unique(sequences[pad_mask])
    pool = np.asarray(pool)
    row = positive_mask(pool, sequences, pad_mask, sids, p, o)[int(np.flatnonzero(pool == item)[0])]
    return {int(x) for x in pool[row]}


def alignment_pool(sequences: np.ndarray, pad_mask: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    pool = np.unique(sequences[pad_mask])
    if len(pool) > cap:
        pool = np.sort(rng.choice(pool, size=cap, replace=False))
    return pool


def _multi_positive_nce(sim: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    num = torch.logsumexp(sim.masked_fill(~pos, float("-inf")), dim=1)
    den = torch.logsumexp(sim, dim=1)
    return -(num - den).mean()


def code_guided_alignment_loss(
    e_sid: torch.Tensor, e_hid: torch.Tensor, positives: torch.Tensor, tau: float
) -> torch.Tensor:
    """Symmetric 1-to-many InfoNCE; the denominator spans every pool item."""
    if e_sid.shape[0] == 0:
        raise ValueError("empty batch")
    positives = torch.as_tensor(positives, dtype=torch.bool, device=e_sid.device)
    sim = _cos_matrix(e_sid, e_hid) / tau
    return _multi_positive_nce(sim, positives) + _multi_positive_nce(sim.T, positives.T)


def masked_granularity_loss(u: torch.Tensor, u_masked: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE between global and masked user views (positive pair in the denominator)."""
    n = u.shape[0]
    if n < 1:
        raise ValueError("need at least one user")
    sim = _cos_matrix(u, u_masked) / tau
    labels = torch.arange(n, device=u.device)
    return F.cross_entropy(sim, labels) + F.cross_entropy(sim.T, labels)


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def total_loss(l_rec, l_ca, l_msg, beta: float, gamma: float):
    """Weighted sum; a ``None`` term is treated as switched off."""
    if beta < 0 or gamma < 0:
        raise ValueError("loss weights must be non-negative")
    total = l_rec
    if l_ca is not None and beta:
        total = total + beta * l_ca
    if l_msg is not None and gamma:
        total = total + gamma * l_msg
    report = LossReport(
        l_rec=_scalar(l_rec),
        l_ca=_scalar(l_ca) if l_ca is not None else 0.0,
        l_msg=_scalar(l_msg) if l_msg is not None else 0.0,
        total=_scalar(total),
        beta=beta,
        gamma=gamma,
    )
    return total, report
