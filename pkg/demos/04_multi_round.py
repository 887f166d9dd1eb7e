#!/usr/bin/env python3
# Multi-round expansion: 8 founding domains, then four waves of 4 newcomers.
# Each finished wave joins the source pool for the next one.

# %%
from hatsim import ExperimentConfig, run_mrse

cfg = ExperimentConfig()
rep = run_mrse(cfg, seed=0)
for r in rep.rounds:
    print(r["round"], r["registry_size"], f"{r['mean_accuracy']:.3f}",
          r["traffic_bytes"], r["cumulative_traffic_bytes"])

# %% which sources did the last wave pick? ids >= 8 were targets once
[t["selected"] for t in rep.targets[-4:]]

# %% same seed, same bytes
run_mrse(cfg, seed=0).to_json() == rep.to_json()
