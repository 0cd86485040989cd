"""The 64/16-episode learnability run: loss ratio, val AP@0.5, MC accuracy, runtime."""
import json
import sys
import time

from villa.bench import generate_episodes
from villa.config import RunConfig
from villa.train import evaluate, train

cfg = RunConfig()
t0 = time.perf_counter()
eps = generate_episodes(0, cfg.generator, 80)
res = train(cfg, eps[:64])
summary = evaluate(res.model, eps[64:]).summary()
elapsed = time.perf_counter() - t0
out = {"initial_loss": res.initial_loss, "final_loss": res.final_loss,
       "ratio": res.final_loss / res.initial_loss, "seconds": elapsed, **summary}
json.dump(out, sys.stdout, indent=1)
print()
