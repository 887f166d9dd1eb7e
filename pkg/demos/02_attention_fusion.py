#!/usr/bin/env python3
# Three sources that each know two of three classes. No single one is right
# everywhere, so a per-sample mixture should beat any fixed weighting.

# %%
import numpy as np
from hatsim import ExperimentConfig, run_otse
from hatsim.experiment import build_conflict_fleet

cfg = ExperimentConfig().replace(**{
    "task.num_classes": 3, "task.stddev": 1.0, "fleet.source_labels": 2,
    "fleet.max_angle": 1.5, "fleet.max_translation": 3.0,
    "selection.eta": 1.0, "selection.n_p": 3,
})
fleet = build_conflict_fleet(cfg, seed=1)
[h.model.label_space for h in fleet.registry.sources()]

# %% pseudo-label accuracy of each fusion rule
for name in ("hat", "equal_distill", "nearest_distill"):
    rep = run_otse(cfg, 1, name, fleet)
    print(f"{name:16s} P-Acc {rep.p_acc:.3f}  test {rep.accuracy:.3f}")

# %% per-class mean attention weight: a source should get little weight on
# the class it never saw
rep = run_otse(cfg, 1, "hat", fleet)
r = rep.results[0]
y = r.dataset.hidden(r.pseudo_ids)
print("sources", r.selected)
for c in range(3):
    print("class", c, np.round(r.pseudo_weights[y == c].mean(axis=0), 3))

# %% alpha follows the mixer's labeled accuracy
h = r.history
[(row["epoch"], round(row["mixer_acc"], 3), round(row["alpha"], 3)) for row in h[::20]]
