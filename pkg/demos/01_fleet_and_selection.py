#!/usr/bin/env python3
# Build a synthetic fleet and walk through the two selection stages by hand.

# %%
import numpy as np
from hatsim import ExperimentConfig
from hatsim.experiment import build_otse_fleet
from hatsim.selection import SelectionConfig, coarse_select, extract_stat_features, joint_select
from hatsim.transport import TrafficLedger

np.set_printoptions(precision=3, suppress=True)

cfg = ExperimentConfig()
fleet = build_otse_fleet(cfg, seed=0)
target = fleet.datasets[fleet.target_ids[0]]
print("target", target.domain_id, "labeled", len(target.labeled_idx), "of", len(target.train))

# %% every source: label space and model size
for h in fleet.registry.sources():
    print(h.domain_id, h.model.label_space, h.model.param_count)

# %% coarse stage: only 4 numbers per input dim cross the wire
feats = extract_stat_features(target.X[target.train])
print(np.vstack(feats.vectors()))

fleet.registry.register_target(target.domain_id)
ledger = TrafficLedger()
sel = SelectionConfig(eta=0.3, n_p=3)
ids, s, received = coarse_select(feats, fleet.registry, sel, ledger, target.domain_id)
for i in sorted(s, key=s.get, reverse=True):
    print(f"{i:3d}  s={s[i]:+.4f}", "<- kept" if i in ids else "")
ledger.per_kind

# %% fine stage: centroid similarity x labeled accuracy
out = joint_select(received, target, sel, ledger)
for i, e in out.scores.items():
    print(i, {k: round(v, 3) for k, v in e.items()})
out.final_ids

# %% what did it cost
ledger.total_bytes, ledger.source_encoder_inference_count
