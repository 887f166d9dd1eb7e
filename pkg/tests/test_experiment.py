import csv
import json

import numpy as np
import pytest

from hatsim import ExperimentConfig
from hatsim.errors import InvalidInputError
from hatsim.experiment import (
    build_conflict_fleet,
    build_otse_fleet,
    run_baseline_grid,
    run_mrse,
    run_otse,
    run_sweep,
    write_comparison,
)
from hatsim.nn import read_model


def test_otse_replay_is_byte_identical(small_cfg):
    a, b = run_otse(small_cfg, 4), run_otse(small_cfg, 4)
    assert a.to_json() == b.to_json()
    assert run_otse(small_cfg, 5).to_json() != a.to_json()


def test_shared_fleet_gives_the_same_report(small_cfg, small_fleet):
    assert run_otse(small_cfg, 3, "hat", small_fleet).to_json() == run_otse(small_cfg, 3, "hat").to_json()


def test_otse_report_contents(small_cfg, small_fleet):
    rep = run_otse(small_cfg, 3, "hat", small_fleet)
    (t,) = rep.targets
    assert t["target_id"] == small_fleet.target_ids[0]
    # coarse stage keeps ceil(0.5 * 4) = 2 candidates, fewer than n_p = 3
    assert len(t["selected"]) == 2
    assert 0 <= t["test_acc"] <= 1 and 0 <= t["p_acc"] <= 1
    assert rep.inference_count == t["inference_selection"] + t["inference_training"]
    assert rep.traffic["total_bytes"] == sum(rep.traffic["per_kind"].values()) > 0
    sup = run_otse(small_cfg, 3, "supervised", small_fleet)
    assert sup.traffic["total_bytes"] == 0 and sup.inference_count == 0 and sup.p_acc is None


def test_fleet_shapes(small_cfg, small_fleet):
    assert len(small_fleet.registry) == small_cfg.fleet.n_sources
    for h in small_fleet.registry.sources():
        assert len(h.model.label_space) == small_cfg.fleet.source_labels
    target = small_fleet.datasets[small_fleet.target_ids[0]]
    assert target.label_space == tuple(range(small_cfg.task.num_classes))
    conflict = build_conflict_fleet(small_cfg.replace(**{"task.num_classes": 3, "fleet.source_labels": 2}), 0)
    assert [h.model.label_space for h in conflict.registry.sources()] == [(0, 1), (0, 2), (1, 2)]
    assert conflict.target_ids == [3]


def test_three_sources_beat_supervised_on_average():
    cfg = ExperimentConfig().replace(**{"fleet.n_sources": 3, "selection.eta": 1.0})
    reps = run_baseline_grid(cfg, ["hat", "supervised"], range(5))
    hat = np.mean([r.accuracy for r in reps[:5]])
    sup = np.mean([r.accuracy for r in reps[5:]])
    assert hat > sup


def test_mrse_rounds_grow_the_registry(small_cfg):
    rep = run_mrse(small_cfg.replace(**{"mrse.layout": (3, 2, 1, 2)}), 0)
    assert [r["registry_size"] for r in rep.rounds] == [3, 5, 6]
    assert [r["targets"] for r in rep.rounds] == [[3, 4], [5], [6, 7]]
    cum = np.cumsum([r["traffic_bytes"] for r in rep.rounds]).tolist()
    assert [r["cumulative_traffic_bytes"] for r in rep.rounds] == cum
    assert rep.traffic["total_bytes"] == cum[-1]
    assert len(rep.targets) == 5
    assert run_mrse(small_cfg.replace(**{"mrse.layout": (3, 2, 1, 2)}), 0).to_json() == rep.to_json()


def test_mrse_needs_two_groups(small_cfg):
    with pytest.raises(InvalidInputError):
        run_mrse(small_cfg.replace(**{"mrse.layout": (4,)}), 0)


def test_grid_row_order_and_count(small_cfg):
    names = ["hat", "supervised", "equal_distill"]
    reps = run_baseline_grid(small_cfg, names, range(5))
    assert len(reps) == 15
    assert [(r.strategy, r.seed) for r in reps] == [(n, s) for n in names for s in range(5)]
    with pytest.raises(ValueError):
        run_baseline_grid(small_cfg, [], [0])


def test_grid_mrse_mode(small_cfg):
    reps = run_baseline_grid(small_cfg.replace(**{"mrse.layout": (2, 1)}), ["hat"], [0, 1], mode="mrse")
    assert [r.mode for r in reps] == ["mrse", "mrse"]


def test_sweep_rows_and_value_coercion(small_cfg):
    collected = []
    rows = run_sweep(small_cfg, "np", ["1", "2"], [0], collect=collected)
    assert [r["np"] for r in rows] == [1, 2]
    assert [len(r.targets[0]["selected"]) for r in collected] == [1, 2]
    rows = run_sweep(small_cfg, "b", ["auto", "0.4"], [0])
    assert [r["b"] for r in rows] == [None, 0.4]
    with pytest.raises(InvalidInputError):
        run_sweep(small_cfg, "selection.nonexistent", ["1"], [0])
    with pytest.raises(InvalidInputError):
        run_sweep(small_cfg, "bogus", ["1"], [0])


def test_report_write(tmp_path, small_cfg, small_fleet):
    rep = run_otse(small_cfg, 3, "hat", small_fleet)
    rep.write(tmp_path, models=True, weights=True)
    tid = rep.targets[0]["target_id"]
    assert json.loads((tmp_path / "report.json").read_text())["accuracy"] == rep.accuracy
    assert (tmp_path / f"history_{tid}.csv").exists()
    model = read_model(tmp_path / f"model_{tid}.bin")
    assert model.param_count == rep.results[0].model.param_count
    rows = list(csv.reader(open(tmp_path / f"weights_{tid}.csv")))
    assert rows[0] == ["sample_id"] + [f"w_{s}" for s in rep.targets[0]["selected"]]
    assert len(rows) - 1 == len(rep.results[0].pseudo_ids)


def test_write_comparison(tmp_path):
    path = tmp_path / "c.csv"
    write_comparison([{"eta": 0.5, "strategy": "hat", "seed": 0, "accuracy": 0.8, "p_acc": None,
                       "traffic_bytes": 10, "inference_count": 4}], path, ("eta",))
    rows = list(csv.DictReader(open(path)))
    assert rows == [{"eta": "0.5", "strategy": "hat", "seed": "0", "accuracy": "0.8", "p_acc": "",
                     "traffic_bytes": "10", "inference_count": "4"}]


def test_build_otse_fleet_is_deterministic(small_cfg):
    a, b = build_otse_fleet(small_cfg, 9), build_otse_fleet(small_cfg, 9)
    assert a.target_ids == b.target_ids
    for ha, hb in zip(a.registry.sources(), b.registry.sources()):
        assert ha.model.to_bytes() == hb.model.to_bytes()
