"""Multi-seed ablation comparison: baseline vs. each ``KEY=VAL`` toggle."""
from __future__ import annotations

import copy
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

from .bench import generate_episodes
from .config import RunConfig, apply_ablation

DEFAULT_ABLATIONS = ("vfdec_on=false", "cam_on=false")


@dataclass(frozen=True)
class Job:
    variant: str
    seed: int
    cfg: RunConfig
    n_train: int
    n_val: int


def _run(job: Job) -> dict:
    from .train import evaluate, train

    eps = generate_episodes(job.seed, job.cfg.generator, job.n_train + job.n_val)
    result = train(job.cfg, eps[: job.n_train], measure=False)
    summary = evaluate(result.model, eps[job.n_train :]).summary()
    return {"variant": job.variant, "seed": job.seed, "AP": summary["AP"], "mc_accuracy": summary["mc_accuracy"],
            "AP50": summary["AP50"], "final_loss": result.history[-1]["total"] if result.history else None}


def compare(
    base: RunConfig,
    ablations: Sequence[str] = DEFAULT_ABLATIONS,
    seeds: Sequence[int] = range(5),
    n_train: int = 64,
    n_val: int = 16,
    workers: Optional[int] = None,
) -> dict:
    """Train every (variant, seed) pair and report per-variant medians.

    Each seed fixes both the generated data and the model init, so variants
    are compared on identical episodes.
    """
    jobs = []
    for variant in ("baseline", *ablations):
        for seed in seeds:
            cfg = copy.deepcopy(base)
            cfg.seed = seed
            if variant != "baseline":
                cfg = apply_ablation(cfg, variant)
            cfg.validate()
            jobs.append(Job(variant, seed, cfg, n_train, n_val))
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            runs = list(pool.map(_run, jobs))
    else:
        runs = [_run(j) for j in jobs]

    medians = {}
    for variant in ("baseline", *ablations):
        rows = [r for r in runs if r["variant"] == variant]
        medians[variant] = {k: statistics.median(r[k] for r in rows) for k in ("AP", "AP50", "mc_accuracy")}
    base_m = medians["baseline"]
    # the reference expectation is that removing either component hurts
    direction = {
        v: {k: base_m[k] - medians[v][k] for k in ("AP", "mc_accuracy")} | {
            "baseline_better": base_m["AP"] >= medians[v]["AP"] and base_m["mc_accuracy"] >= medians[v]["mc_accuracy"]
        }
        for v in ablations
    }
    return {
        "seeds": list(seeds),
        "n_train": n_train,
        "n_val": n_val,
        "max_iters": base.max_iters,
        "config_digest": base.digest(),
        "runs": runs,
        "medians": medians,
        "direction": direction,
    }
