"""Baseline vs. ablated variants over several seeds; writes a JSON report.

    python scripts/run_ablation.py --out runs/ablation --workers 4
"""
import argparse
import json
from pathlib import Path

from villa.ablation import DEFAULT_ABLATIONS, compare
from villa.config import load_config

p = argparse.ArgumentParser()
p.add_argument("--config", type=Path)
p.add_argument("--out", type=Path, default=Path("runs/ablation"))
p.add_argument("--seeds", type=int, default=5)
p.add_argument("--ablate", action="append", help="KEY=VAL (default: vfdec_on=false, cam_on=false)")
p.add_argument("--iters", type=int, help="override max_iters")
p.add_argument("--workers", type=int, default=1)
args = p.parse_args()

cfg = load_config(args.config)
if args.iters is not None:
    cfg.max_iters = args.iters
report = compare(cfg, args.ablate or DEFAULT_ABLATIONS, range(args.seeds), workers=args.workers)

args.out.mkdir(parents=True, exist_ok=True)
(args.out / "ablation.json").write_text(json.dumps(report, indent=1, sort_keys=True))
print(f"{'variant':<18} {'AP':>7} {'AP50':>7} {'MC':>7}")
for name, m in report["medians"].items():
    print(f"{name:<18} {m['AP']:7.3f} {m['AP50']:7.3f} {m['mc_accuracy']:7.3f}")
for name, d in report["direction"].items():
    verdict = "baseline better" if d["baseline_better"] else "mixed / ablation better"
    print(f"{name}: dAP {d['AP']:+.3f}, dMC {d['mc_accuracy']:+.3f} ({verdict})")
