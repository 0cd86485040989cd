"""Mask and text losses, Hungarian matching, the weighted total objective, and AdamW."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, DimensionError


@dataclass
class LossWeights:
    txt: float = 1.0
    mask: float = 1.0
    ce: float = 2.0
    dice: float = 0.5
    ce_f: Optional[float] = None  # per-scale overrides of ``ce``
    ce_v: Optional[float] = None
    empty: float = 0.1  # weight of the push-to-empty term for unmatched predictions

    def validate(self):
        vals = [self.txt, self.mask, self.ce, self.dice, self.empty, self.ce_f or 0.0, self.ce_v or 0.0]
        if any(v < 0 for v in vals):
            raise ConfigError(f"loss weights must be non-negative: {self}")

    def ce_for(self, scale: str) -> float:
        override = self.ce_f if scale == "f" else self.ce_v
        return self.ce if override is None else override


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    weight_decay: float = 0.02
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "cosine"
    warmup_iters: int = 10

    def validate(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError(f"invalid optimizer config {self}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(pred_prob: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """``1 - (2 sum(p g) + 1) / (sum p + sum g + 1)``."""
    gt = torch.as_tensor(gt, dtype=pred_prob.dtype)
    _check_shapes(pred_prob, gt)
    inter = (pred_prob * gt).sum()
    return 1.0 - (2.0 * inter + 1.0) / (pred_prob.sum() + gt.sum() + 1.0)


def bce_loss(pred_logit: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy on logits, in the overflow-free softplus form."""
    gt = torch.as_tensor(gt, dtype=pred_logit.dtype)
    _check_shapes(pred_logit, gt)
    return (F.softplus(pred_logit) - pred_logit * gt).mean()


def pairwise_mask_losses(logits: torch.Tensor, gts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """BCE and dice for every (prediction, target) pair.

    ``logits`` is ``P x D`` and ``gts`` is ``G x D`` (flattened masks); both
    results are ``P x G``.
    """
    gts = gts.to(logits.dtype)
    d = logits.shape[-1]
    bce = F.softplus(logits).mean(dim=-1, keepdim=True) - logits @ gts.T / d
    prob = torch.sigmoid(logits)
    inter = prob @ gts.T
    dice = 1.0 - (2.0 * inter + 1.0) / (prob.sum(-1, keepdim=True) + gts.sum(-1)[None, :] + 1.0)
    return bce, dice


def hungarian_match(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of ``min(P, G)`` pairs, sorted by prediction."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-D, got {cost.shape}")
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def objectness_loss(scores: torch.Tensor, matched: torch.Tensor, empty_weight: float) -> torch.Tensor:
    """Weighted BCE of per-token objectness logits; unmatched tokens weigh ``empty_weight``."""
    w = torch.where(matched, torch.ones_like(scores), torch.full_like(scores, empty_weight))
    ce = F.softplus(scores) - scores * matched.to(scores.dtype)
    return (w * ce).sum() / w.sum()


def matched_mask_loss(
    logits: torch.Tensor,
    gts: torch.Tensor,
    weights: LossWeights,
    scale: str,
    scores: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Match predictions to targets; returns (BCE, dice) averaged over matched
    pairs, plus ``weights.empty`` times the same averages for unmatched
    predictions supervised towards an empty mask.

    With objectness ``scores`` (one logit per prediction) their cross entropy
    against the matching is added to the BCE term.
    """
    p = logits.shape[0]
    flat = logits.reshape(p, -1)
    g = gts.reshape(gts.shape[0], -1).to(flat.dtype)
    empty = torch.zeros(1, flat.shape[1], dtype=flat.dtype)
    bce, dice = pairwise_mask_losses(flat, torch.cat([g, empty], dim=0))
    pairs = hungarian_match((weights.ce_for(scale) * bce[:, :-1] + weights.dice * dice[:, :-1]).detach().numpy())
    target = [g.shape[0]] * p
    for i, j in pairs:
        target[i] = j
    idx = torch.arange(p)
    tgt = torch.as_tensor(target)
    bce_sel, dice_sel = bce[idx, tgt], dice[idx, tgt]
    hit = tgt < g.shape[0]
    out = []
    for v in (bce_sel, dice_sel):
        term = v[hit].mean() if hit.any() else v.sum() * 0.0
        if (~hit).any():
            term = term + weights.empty * v[~hit].mean()
        out.append(term)
    if scores is not None:
        out[0] = out[0] + objectness_loss(scores, hit, weights.empty)
    return out[0], out[1]


def frame_mask_loss(
    frame_logits: torch.Tensor,
    gt_tracks: torch.Tensor,
    weights: LossWeights,
    frame_scores: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-frame matching of frame tokens; ``frame_logits`` is T x N x H x W,
    ``gt_tracks`` is G x T x H x W. Averaged over frames."""
    ces, dices = [], []
    for t in range(frame_logits.shape[0]):
        sc = None if frame_scores is None else frame_scores[t]
        ce, dc = matched_mask_loss(frame_logits[t], gt_tracks[:, t], weights, "f", sc)
        ces.append(ce)
        dices.append(dc)
    return torch.stack(ces).mean(), torch.stack(dices).mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    txt: torch.Tensor
    ce_f: torch.Tensor
    ce_v: torch.Tensor
    dice_f: torch.Tensor
    dice_v: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "txt", "ce_f", "ce_v", "dice_f", "dice_v")}


def total_loss(txt, ce_f, ce_v, dice_f, dice_v, weights: LossWeights = LossWeights()):
    """Weighted objective: text term plus per-scale BCE/dice mask terms."""
    mask_f = weights.ce_for("f") * ce_f + weights.dice * dice_f
    mask_v = weights.ce_for("v") * ce_v + weights.dice * dice_v
    return weights.txt * txt + weights.mask * (mask_f + mask_v)


def learning_rate(cfg: OptimizerConfig, it: int, max_iters: int) -> float:
    if cfg.warmup_iters > 0 and it <= cfg.warmup_iters:
        return cfg.lr * it / cfg.warmup_iters
    if cfg.schedule == "constant" or max_iters <= cfg.warmup_iters:
        return cfg.lr
    progress = min(1.0, (it - cfg.warmup_iters) / (max_iters - cfg.warmup_iters))
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def init_adam_state(params: Sequence[torch.Tensor]) -> dict:
    return {
        "m": [torch.zeros_like(p) for p in params],
        "v": [torch.zeros_like(p) for p in params],
    }


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[Optional[torch.Tensor]],
    state: dict,
    cfg: OptimizerConfig,
    it: int,
    max_iters: int,
) -> float:
    """One in-place AdamW update at 1-based iteration ``it``; returns the lr used."""
    if it < 1:
        raise ConfigError(f"iteration must be >= 1, got {it}")
    lr = learning_rate(cfg, it, max_iters)
    b1, b2 = cfg.betas
    c1, c2 = 1.0 - b1 ** it, 1.0 - b2 ** it
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = torch.zeros_like(p)
        _check_shapes(p, g)
        p.mul_(1.0 - lr * cfg.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + cfg.eps))
    return lr
