"""Estimate the return-based scale of a reward stream and compare it with
the reward std, the return std and the horizon rule on the six scenarios."""

import numpy as np

from tdscale.env import ScenarioKind, gen_scenario
from tdscale.oracle import scenario_report
from tdscale.stats import EpisodeTrace, ReturnStats, sigma_squared

# online estimate from one long episode
rng = np.random.default_rng(0)
rewards = rng.exponential(2.0, size=5000)
stats = ReturnStats().accumulate_episode(EpisodeTrace.constant_discount(rewards, 0.99))
est = sigma_squared(stats)
print(f"V[R]={est.var_r:.3f}  V[gamma]={est.var_gamma:.2e}  E[G^2]={est.e_g2:.1f}  sigma={est.sigma:.3f}")

print(f"\n{'scenario':<11}{'sigma':>9}{'oracle':>9}{'rew std':>9}{'ret std':>9}")
for kind in ScenarioKind:
    r = scenario_report(gen_scenario(kind, seed=1))
    print(f"{kind.value:<11}{r['sigma_ratio']:>9.3g}{r['td_std_ratio']:>9.3g}"
          f"{r['reward_std_ratio']:>9.3g}{r['return_std_ratio']:>9.3g}")
