"""Region similarity J, boundary F, tracklet AP/AR, and multiple-choice accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

from .decoder import MaskTracklet
from .errors import DimensionError

AP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2).tolist())
MAX_DETS = 100


def _masks(x) -> np.ndarray:
    return np.asarray(x.masks if isinstance(x, MaskTracklet) else x, dtype=bool)


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionError(f"tracklet shapes differ: {a.shape} vs {b.shape}")


def region_similarity_J(pred, gt) -> float:
    """Mean per-frame IoU; frames empty in both count as 1."""
    a, b = _masks(pred), _masks(gt)
    _same_shape(a, b)
    scores = []
    for pa, gb in zip(a, b):
        union = np.logical_or(pa, gb).sum()
        scores.append(1.0 if union == 0 else np.logical_and(pa, gb).sum() / union)
    return float(np.mean(scores))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground cells 4-adjacent to background or to the image edge."""
    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    return mask & ~binary_erosion(mask, structure=cross, border_value=0)


def frame_f_measure(pred: np.ndarray, gt: np.ndarray, tolerance: int = 1) -> float:
    if not pred.any() and not gt.any():
        return 1.0
    if not pred.any() or not gt.any():
        return 0.0
    bp, bg = boundary(pred), boundary(gt)
    square = np.ones((2 * tolerance + 1, 2 * tolerance + 1), dtype=bool)
    gt_zone = binary_dilation(bg, structure=square)
    pred_zone = binary_dilation(bp, structure=square)
    precision = (bp & gt_zone).sum() / bp.sum()
    recall = (bg & pred_zone).sum() / bg.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def contour_accuracy_F(pred, gt, tolerance: int = 1) -> float:
    a, b = _masks(pred), _masks(gt)
    _same_shape(a, b)
    return float(np.mean([frame_f_measure(pa, gb, tolerance) for pa, gb in zip(a, b)]))


def spatiotemporal_iou(a, b) -> float:
    a, b = _masks(a), _masks(b)
    _same_shape(a, b)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """Area under the max-interpolated precision/recall curve."""
    if n_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * p[:-1]))


def tracklet_ap(
    episodes: Sequence[tuple[Sequence[MaskTracklet], Sequence[MaskTracklet]]],
    thresholds: Sequence[float] = AP_THRESHOLDS,
) -> tuple[float, float]:
    """Dataset-level (AP, AR) over ``[(predictions, ground truths), ...]``.

    Detections from every episode are ranked together by confidence; each
    is greedily matched to the best still-unmatched ground truth of its own
    episode. A single episode may be passed as ``[(preds, gts)]``.
    """
    dets = []
    n_gt = 0
    ious = []
    for e, (preds, gts) in enumerate(episodes):
        n_gt += len(gts)
        preds = sorted(enumerate(preds), key=lambda ip: (-ip[1].confidence, ip[0]))[:MAX_DETS]
        mat = np.array([[spatiotemporal_iou(p, g) for g in gts] for _, p in preds]).reshape(len(preds), len(gts))
        ious.append(mat)
        for rank, (_, p) in enumerate(preds):
            dets.append((-p.confidence, e, rank))
    dets.sort()
    if n_gt == 0:
        return 0.0, 0.0
    aps, ars = [], []
    for thr in thresholds:
        used = [np.zeros(m.shape[1], dtype=bool) for m in ious]
        tp = np.zeros(len(dets))
        for k, (_, e, rank) in enumerate(dets):
            row = np.where(used[e], -1.0, ious[e][rank])
            if row.size and row.max() >= thr - 1e-12:
                used[e][int(row.argmax())] = True
                tp[k] = 1.0
        aps.append(_interpolated_ap(tp, n_gt))
        ars.append(tp.sum() / n_gt)
    return float(np.mean(aps)), float(np.mean(ars))


def mc_accuracy(chosen: Sequence[int], keys: Sequence[int]) -> float:
    if len(chosen) != len(keys):
        raise DimensionError(f"{len(chosen)} answers for {len(keys)} keys")
    if not keys:
        return 0.0
    return float(np.mean([int(c) == int(k) for c, k in zip(chosen, keys)]))


@dataclass
class EvalResult:
    J: float = 0.0
    F: float = 0.0
    JF_mean: float = 0.0
    AP: float = 0.0
    AR: float = 0.0
    AP50: float = 0.0
    mc_accuracy: float = 0.0
    per_episode: list[dict] = field(default_factory=list)

    def summary(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("J", "F", "JF_mean", "AP", "AR", "AP50", "mc_accuracy")}
