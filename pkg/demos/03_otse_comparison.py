#!/usr/bin/env python3
# One-time expansion on the default 10-source fleet, five seeds.

# %%
import numpy as np
from hatsim import ExperimentConfig, run_baseline_grid

cfg = ExperimentConfig()
names = ["hat", "supervised", "equal_distill", "random_select", "no_coarse"]
reps = run_baseline_grid(cfg, names, range(5))

# %%
acc = {}
for r in reps:
    acc.setdefault(r.strategy, []).append(r.accuracy)
for k, v in acc.items():
    print(f"{k:15s} {np.mean(v):.3f} +- {np.std(v):.3f}  {np.round(v, 3)}")

# %% selection traffic and source inferences per strategy
for k in names:
    rr = [r for r in reps if r.strategy == k]
    print(f"{k:15s} bytes {np.mean([r.traffic['total_bytes'] for r in rr]):9.0f}"
          f"  inferences {np.mean([r.inference_count for r in rr]):7.0f}")
