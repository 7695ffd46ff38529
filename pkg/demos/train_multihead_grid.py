"""Ten heads with discounts 0..1, with and without reward clipping, on the
multi-scale gridworld. Prints per-head unscaled and scaled mean losses."""

import sys

from tdscale.env import GridMDP
from tdscale.learner import LearnerConfig, run_training
from tdscale.values import standard_heads

updates = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
config = LearnerConfig(heads=standard_heads(), value_fn="smallnet", features="coords",
                       scaler="return_based")
log = run_training(GridMDP(), config, updates, seed=0)

print(f"{'head':>4} {'gamma':>6} {'clip':>5} {'unscaled':>11} {'scaled':>9}")
for h, spec in enumerate(config.heads):
    print(f"{h:>4} {spec.discount:>6} {spec.clip!s:>5} {log.column('loss_unscaled', h).mean():>11.3e}"
          f" {log.column('loss_scaled', h).mean():>9.3f}")
