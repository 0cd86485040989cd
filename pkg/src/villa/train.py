"""Training loop and evaluation over a generated dataset."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .bench import QueryEpisode, choose_option
from .checkpoint import save_checkpoint
from .config import RunConfig
from .decoder import MaskTracklet
from .errors import NumericalAbort
from .metrics import EvalResult, contour_accuracy_F, region_similarity_J, tracklet_ap
from .model import ViLLa
from .supervision import adamw_step, init_adam_state

log = logging.getLogger(__name__)

CSV_HEADER = ("iter", "total", "txt", "ce_f", "ce_v", "dice_f", "dice_v")
MC_RULE = (
    "highest-confidence predicted tracklet -> colour (palette entry most pixels under the mask match) "
    "or shape (mask restricted to that colour, median per-frame fill ratio of its bounding box: "
    "circle pi/4, square 1, triangle 1/2); "
    "'not sure' when no tracklet is predicted"
)


@dataclass
class TrainResult:
    model: ViLLa
    history: list[dict] = field(default_factory=list)
    opt_state: Optional[dict] = None
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def dataset_loss(model: ViLLa, episodes: Sequence[QueryEpisode]) -> float:
    with torch.no_grad():
        return float(np.mean([float(model.loss(ep).total) for ep in episodes]))


def train(
    cfg: RunConfig,
    episodes: Sequence[QueryEpisode],
    out_dir: Optional[Path] = None,
    measure: bool = True,
) -> TrainResult:
    torch.set_num_threads(1)
    model = ViLLa(cfg)
    params = list(model.parameters())
    state = init_adam_state(params)
    rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(model=model, opt_state=state)
    if measure:
        result.initial_loss = dataset_loss(model, episodes)
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "loss.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
    try:
        for it in range(1, cfg.max_iters + 1):
            batch = rng.choice(len(episodes), size=min(cfg.batch_size, len(episodes)), replace=False)
            parts = [model.loss(episodes[int(i)]) for i in batch]
            total = torch.stack([p.total for p in parts]).mean()
            row = {"iter": it}
            for key in CSV_HEADER[1:]:
                row[key] = float(np.mean([float(getattr(p, key).detach()) for p in parts]))
            if not math.isfinite(row["total"]):
                raise NumericalAbort(f"non-finite loss at iteration {it}: {row}")
            grads = torch.autograd.grad(total, params, allow_unused=True)
            adamw_step(params, grads, state, cfg.optimizer, it, cfg.max_iters)
            result.history.append(row)
            if writer is not None:
                writer.writerow([it] + [repr(row[k]) for k in CSV_HEADER[1:]])
            if it % 20 == 0 or it == 1:
                log.info("iter %d total %.4f txt %.4f", it, row["total"], row["txt"])
            if out_dir is not None and cfg.save_every and it % cfg.save_every == 0:
                save_checkpoint(out_dir / f"checkpoint_{it:06d}.bin", model, cfg, it, state)
    finally:
        if fh is not None:
            fh.close()
    if measure:
        result.final_loss = dataset_loss(model, episodes)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.bin", model, cfg, cfg.max_iters, state)
    return result


def predictions(tracklets: Sequence[MaskTracklet]) -> list[MaskTracklet]:
    """Non-empty tracklets, most confident first."""
    keep = [t for t in tracklets if t.masks.any()]
    return sorted(keep, key=lambda t: (-t.confidence, t.token_index))


def union_masks(tracklets: Sequence[MaskTracklet], shape) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for t in tracklets:
        out |= t.masks
    return out


def score_episodes(episodes: Sequence[QueryEpisode], preds: Sequence[Sequence[MaskTracklet]]) -> EvalResult:
    """Metrics for given per-episode predictions (already filtered and ranked)."""
    rows, pairs, chosen, keys = [], [], [], []
    js, fs = [], []
    for ep, pr in sorted(zip(episodes, preds), key=lambda x: x[0].id):
        gts = ep.target_tracklets()
        shape = gts[0].masks.shape
        gt_mask = union_masks(gts, shape)
        best = pr[0].masks if pr else np.zeros(shape, dtype=bool)
        j = region_similarity_J(best, gt_mask)
        f = contour_accuracy_F(best, gt_mask)
        choice = choose_option(ep.mc, ep.clip.frames, pr[0].masks if pr else None)
        js.append(j)
        fs.append(f)
        pairs.append((pr, gts))
        chosen.append(choice)
        keys.append(ep.mc.key)
        rows.append({"id": ep.id, "J": j, "F": f, "choice": choice, "key": ep.mc.key,
                     "n_pred": len(pr), "query": ep.query})
    ap, ar = tracklet_ap(pairs)
    ap50, _ = tracklet_ap(pairs, thresholds=(0.5,))
    acc = float(np.mean([c == k for c, k in zip(chosen, keys)])) if keys else 0.0
    j, f = float(np.mean(js)), float(np.mean(fs))
    return EvalResult(J=j, F=f, JF_mean=(j + f) / 2, AP=ap, AR=ar, AP50=ap50, mc_accuracy=acc, per_episode=rows)


def evaluate(model: ViLLa, episodes: Sequence[QueryEpisode]) -> EvalResult:
    torch.set_num_threads(1)
    preds = [predictions(model.infer(ep)[0]) for ep in episodes]
    return score_episodes(episodes, preds)


def evaluate_ground_truth(episodes: Sequence[QueryEpisode]) -> EvalResult:
    return score_episodes(episodes, [ep.target_tracklets() for ep in episodes])
