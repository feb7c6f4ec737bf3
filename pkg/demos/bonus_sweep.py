"""How the reapplicant bonus moves waitlists and welfare.

Draws a synthetic market, solves the belief fixed point for each bonus and
prints the age-0 waitlist share and mean welfare by score bucket.
"""

import logging
import sys

import numpy as np

from waitlist_lab import counterfactual as cf
from waitlist_lab.market import default_market_config, generate_market

logging.basicConfig(level=logging.WARNING)

n = int(sys.argv[1]) if len(sys.argv) > 1 else 150
cfg = default_market_config(n_entrants=n, seed=4, tightness=1.0)
panel = generate_market(cfg)
scen = [cf.Scenario(b=b, M=3, B=200, seed=cfg.seed, damping=0.5) for b in cf.BONUS_SWEEP]
outs = cf.run_scenarios(cfg.theta_true, cfg, scen, panel.belief)

for b in cf.BONUS_SWEEP:
    draws = [o for o in outs if o.b == b]
    wl = np.mean([np.mean(o.sim.out1[o.population.entry_age == 0] < 0) for o in draws])
    iters = [o.iterations for o in draws]
    print(f"b={b:+d}  age-0 waitlist share {wl:.3f}  iterations {iters}")

print("\nmean welfare by first-round score")
rep = cf.welfare_report(outs)
buckets = [b for b, _, _ in cf.SCORE_BUCKETS]
print("   b " + "".join(f"{b:>9s}" for b in buckets))
for b in cf.BONUS_SWEEP:
    row = {r["bucket"]: r["mean_V"] for r in rep.by_bucket if r["b"] == b}
    print(f"{b:+4d} " + "".join(f"{row[k]:9.3f}" for k in buckets))
