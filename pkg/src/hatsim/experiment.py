"""End-to-end expansion runs on synthetic fleets.

A *fleet* is a global task plus a set of shifted domains with trained,
frozen source models. ``run_otse`` expands one randomly chosen target domain,
``run_mrse`` grows the system group by group, promoting each round's targets
into the source pool. All randomness derives from the run seed, so replays
produce identical reports.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, StrategySpec, parse_strategy
from .errors import InvalidInputError
from .domains import (
    DomainDataset,
    GlobalTaskSpec,
    make_group_layout,
    make_task,
    random_shift,
    sample_domain,
)
from .injection import (
    AdaptiveLearnerConfig,
    TrainLoopConfig,
    evaluate_split,
    export_history,
    joint_train,
)
from .fusion import export_weights
from .nn import NetModel, make_skeleton, save_model, train_supervised
from .selection import SelectionConfig, candidate_accuracy, select_sources
from .transport import (
    DeviceConstraints,
    Registry,
    SourceDomainHandle,
    TrafficLedger,
    pick_skeleton,
)

# Stream tags keep the random streams of independent pieces apart.
_TASK, _DOMAIN, _SHIFT, _MODEL, _TARGET, _ROLE, _TRAIN, _SELECT = range(8)


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def seed_for(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def skeleton_library(cfg: ExperimentConfig):
    return [make_skeleton(cfg.task.input_dim, hidden) for hidden in cfg.fleet.library]


@dataclass
class Fleet:
    task: GlobalTaskSpec
    datasets: dict  # domain id -> DomainDataset
    registry: Registry
    target_ids: list


def make_domain(cfg: ExperimentConfig, task: GlobalTaskSpec, seed: int, domain_id: int, role: str,
                label_subset=None) -> DomainDataset:
    rng = rng_for(seed, _SHIFT, domain_id)
    n_labels = cfg.fleet.source_labels if role == "source" else cfg.fleet.target_labels
    shift = random_shift(task, rng, max_angle=cfg.fleet.max_angle, max_translation=cfg.fleet.max_translation,
                         scale_range=(cfg.fleet.scale_min, cfg.fleet.scale_max), n_labels=n_labels or None)
    if label_subset is not None:
        shift = dataclasses.replace(shift, label_subset=tuple(sorted(label_subset)))
    if role == "source":
        n, gamma = cfg.fleet.samples_per_domain, cfg.fleet.source_gamma
    else:
        n, gamma = cfg.target.samples or cfg.fleet.samples_per_domain, cfg.target.gamma
    return sample_domain(task, shift, n, gamma, seed_for(seed, _DOMAIN, domain_id), domain_id)


def train_source(cfg: ExperimentConfig, ds: DomainDataset, seed: int) -> NetModel:
    """Supervised source model on the domain's labeled data, returned frozen."""
    rng = rng_for(seed, _MODEL, ds.domain_id)
    lib = skeleton_library(cfg)
    skeleton = lib[int(rng.integers(len(lib)))]
    model = NetModel.build(skeleton, ds.label_space, rng)
    X, y = ds.labeled()
    y_local = np.searchsorted(ds.label_space, y)
    train_supervised(model, X, y_local, cfg.fleet.source_epochs, cfg.fleet.source_lr)
    return model.freeze()


def build_otse_fleet(cfg: ExperimentConfig, seed: int) -> Fleet:
    """``n_sources + 1`` domains, one drawn at random as the target."""
    task = make_task(cfg.task.num_classes, cfg.task.input_dim, cfg.task.stddev,
                     cfg.task.prototype_scale, seed=seed_for(seed, _TASK))
    n = cfg.fleet.n_sources + 1
    target_id = int(rng_for(seed, _ROLE).integers(n))
    registry = Registry()
    datasets = {}
    for d in range(n):
        role = "target" if d == target_id else "source"
        ds = make_domain(cfg, task, seed, d, role)
        datasets[d] = ds
        if role == "source":
            registry.register_source(SourceDomainHandle(d, ds, train_source(cfg, ds, seed)))
    return Fleet(task, datasets, registry, [target_id])


def build_conflict_fleet(cfg: ExperimentConfig, seed: int, subsets=((0, 1), (0, 2), (1, 2))) -> Fleet:
    """Sources with fixed, overlapping label subsets; the last domain is a full-label target.

    No single source covers every class, so any one of them is wrong on a
    whole class of target samples.
    """
    task = make_task(cfg.task.num_classes, cfg.task.input_dim, cfg.task.stddev,
                     cfg.task.prototype_scale, seed=seed_for(seed, _TASK))
    registry = Registry()
    datasets = {}
    for d, subset in enumerate(subsets):
        ds = make_domain(cfg, task, seed, d, "source", label_subset=subset)
        datasets[d] = ds
        registry.register_source(SourceDomainHandle(d, ds, train_source(cfg, ds, seed)))
    target_id = len(subsets)
    datasets[target_id] = make_domain(cfg, task, seed, target_id, "target",
                                      label_subset=range(cfg.task.num_classes))
    return Fleet(task, datasets, registry, [target_id])


@dataclass
class TargetResult:
    target_id: int
    test_acc: float
    val_acc: float
    p_acc: float | None
    selected: list
    selection: dict
    traffic: dict
    inference_selection: int
    inference_training: int
    b: float | None
    history: list = field(default_factory=list, repr=False)
    model: NetModel | None = field(default=None, repr=False)
    dataset: DomainDataset | None = field(default=None, repr=False)
    pseudo_ids: np.ndarray | None = field(default=None, repr=False)
    pseudo_weights: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "test_acc": self.test_acc,
            "val_acc": self.val_acc,
            "p_acc": self.p_acc,
            "selected": self.selected,
            "selection": self.selection,
            "traffic": self.traffic,
            "inference_selection": self.inference_selection,
            "inference_training": self.inference_training,
            "b": self.b,
        }


def target_model_for(cfg: ExperimentConfig, ds: DomainDataset, seed: int) -> NetModel:
    zeta = DeviceConstraints(cfg.target.max_param_count, cfg.target.max_flops)
    skeleton = pick_skeleton(skeleton_library(cfg), zeta, cfg.task.num_classes)
    return NetModel.build(skeleton, range(cfg.task.num_classes), rng_for(seed, _TARGET, ds.domain_id))


def loop_config(cfg: ExperimentConfig, seed: int, domain_id: int) -> TrainLoopConfig:
    t = cfg.training
    return TrainLoopConfig(t.epochs_target, t.epochs_mixer, t.unlabeled_ratio, t.lr_target, t.lr_mixer,
                           t.d_common, t.fixed_alpha, t.kd_full_refresh, t.distill_labeled,
                           seed_for(seed, _TRAIN, domain_id))


def expand_target(cfg: ExperimentConfig, ds: DomainDataset, registry: Registry, strategy: StrategySpec,
                  ledger: TrafficLedger, seed: int) -> TargetResult:
    """Curate a model for one target: select, fuse, inject."""
    model = target_model_for(cfg, ds, seed)
    loop = loop_config(cfg, seed, ds.domain_id)
    if strategy.injection == "none":
        res = joint_train(model, [], ds, loop, injection="none")
        return TargetResult(ds.domain_id, evaluate_split(model, ds, "test"), evaluate_split(model, ds, "val"),
                            None, [], {}, ledger.snapshot(), 0, 0, None, res.history, model, ds)

    s = cfg.selection
    sel_cfg = SelectionConfig(s.eta, s.omega, s.n_p, s.per_class_entropy, s.target_true_labels)
    start = ledger.source_encoder_inference_count
    registry.register_target(ds.domain_id)
    try:
        outcome = select_sources(strategy.selection, ds, registry, sel_cfg, ledger,
                                 rng_for(seed, _SELECT, ds.domain_id))
    finally:
        registry.unregister_target(ds.domain_id)
    inf_sel = ledger.source_encoder_inference_count - start
    sources = outcome.models()
    if strategy.fusion == "nearest":
        sources = sources[:1]
    accs = [outcome.scores.get(i, {}).get("acc") for i in outcome.final_ids[: len(sources)]]
    if any(a is None for a in accs):
        # unevaluated selections (random) are scored here, on the labeled samples only
        X_lab, y_lab = ds.labeled()
        accs = [candidate_accuracy(m, m.encode(X_lab), y_lab) for m in sources]
        ledger.count_inference(len(X_lab) * len(sources))
    b = cfg.training.b
    if b is None:
        b = min(1.0, max(accs) + cfg.training.b_margin)
    learner = AdaptiveLearnerConfig(cfg.training.m, b)
    before = ledger.source_encoder_inference_count
    res = joint_train(model, sources, ds, loop, learner, strategy.fusion, strategy.injection,
                      ledger, source_accuracies=accs)
    p_acc = None
    if res.pseudo_probs is not None:
        p_acc = float(np.mean(np.argmax(res.pseudo_probs, axis=1) == ds.hidden(res.pseudo_ids)))
    return TargetResult(ds.domain_id, evaluate_split(model, ds, "test"), evaluate_split(model, ds, "val"),
                        p_acc, list(outcome.final_ids[: len(sources)]), outcome.to_dict(), ledger.snapshot(),
                        inf_sel, ledger.source_encoder_inference_count - before, b, res.history, model, ds,
                        res.pseudo_ids, res.pseudo_weights)


@dataclass
class RunReport:
    mode: str
    strategy: str
    seed: int
    targets: list
    traffic: dict
    inference_count: int
    config: dict
    rounds: list = field(default_factory=list)
    results: list = field(default_factory=list, repr=False)  # TargetResult objects, not serialised

    @property
    def accuracy(self) -> float:
        return float(np.mean([t["test_acc"] for t in self.targets]))

    @property
    def p_acc(self) -> float | None:
        vals = [t["p_acc"] for t in self.targets if t["p_acc"] is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "strategy": self.strategy,
            "seed": self.seed,
            "accuracy": self.accuracy,
            "p_acc": self.p_acc,
            "targets": self.targets,
            "traffic": self.traffic,
            "inference_count": self.inference_count,
            "rounds": self.rounds,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write(self, out_dir, models: bool = False, weights: bool = False) -> None:
        """``report.json`` and ``history_<target>.csv``; optionally the final
        target models and the per-sample fusion weights."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(self.to_json())
        for r in self.results:
            export_history(r.history, os.path.join(out_dir, f"history_{r.target_id}.csv"))
            if models and r.model is not None:
                save_model(r.model, os.path.join(out_dir, f"model_{r.target_id}.bin"))
            if weights and r.pseudo_weights is not None:
                export_weights(os.path.join(out_dir, f"weights_{r.target_id}.csv"), r.pseudo_ids,
                               r.pseudo_weights, r.selected)


def run_otse(cfg: ExperimentConfig, seed: int | None = None, strategy: StrategySpec | str | None = None,
             fleet: Fleet | None = None) -> RunReport:
    """One-time expansion of a single target against every other domain."""
    seed = cfg.seed if seed is None else seed
    strategy = _strategy(cfg, strategy)
    fleet = fleet or build_otse_fleet(cfg, seed)
    ledger = TrafficLedger()
    results = [expand_target(cfg, fleet.datasets[t], fleet.registry, strategy, ledger, seed)
               for t in fleet.target_ids]
    return RunReport("otse", strategy.name, seed, [r.to_dict() for r in results], ledger.snapshot(),
                     ledger.source_encoder_inference_count, cfg.to_dict(), results=results)


def run_mrse(cfg: ExperimentConfig, seed: int | None = None, strategy: StrategySpec | str | None = None) -> RunReport:
    """Multi-round expansion over the group layout; finished targets become sources."""
    seed = cfg.seed if seed is None else seed
    strategy = _strategy(cfg, strategy)
    layout = make_group_layout(cfg.mrse.layout)
    if len(layout.groups) < 2:
        raise InvalidInputError("MRSE needs at least two groups")
    task = make_task(cfg.task.num_classes, cfg.task.input_dim, cfg.task.stddev,
                     cfg.task.prototype_scale, seed=seed_for(seed, _TASK))
    registry = Registry()
    for d in layout.groups[0]:
        ds = make_domain(cfg, task, seed, d, "source")
        registry.register_source(SourceDomainHandle(d, ds, train_source(cfg, ds, seed)))

    rounds, targets, results = [], [], []
    total = TrafficLedger()
    cumulative = 0
    for j, group in enumerate(layout.groups[1:], start=1):
        ledger = TrafficLedger()
        n_sources = len(registry)
        round_results = []
        for d in group:
            ds = make_domain(cfg, task, seed, d, "target")
            round_results.append(expand_target(cfg, ds, registry, strategy, ledger, seed))
        for r in round_results:
            registry.register_source(SourceDomainHandle(r.target_id, r.dataset, r.model.freeze()))
        cumulative += ledger.total_bytes
        for kind, v in ledger.per_kind.items():
            total.per_kind[kind] += v
        total.count_inference(ledger.source_encoder_inference_count)
        rounds.append({
            "round": j,
            "registry_size": n_sources,
            "targets": list(group),
            "mean_accuracy": float(np.mean([r.test_acc for r in round_results])),
            "traffic_bytes": ledger.total_bytes,
            "cumulative_traffic_bytes": cumulative,
            "inference_count": ledger.source_encoder_inference_count,
        })
        targets += [r.to_dict() for r in round_results]
        results += round_results
    rep = RunReport("mrse", strategy.name, seed, targets, total.snapshot(),
                    total.source_encoder_inference_count, cfg.to_dict(), rounds, results)
    return rep


def _strategy(cfg, strategy):
    if strategy is None:
        return cfg.strategy
    return parse_strategy(strategy) if isinstance(strategy, str) else strategy


COMPARISON_FIELDS = ("strategy", "seed", "accuracy", "p_acc", "traffic_bytes", "inference_count")


def report_row(rep: RunReport, **extra) -> dict:
    row = dict(extra)
    row.update(strategy=rep.strategy, seed=rep.seed, accuracy=rep.accuracy, p_acc=rep.p_acc,
               traffic_bytes=rep.traffic["total_bytes"], inference_count=rep.inference_count)
    return row


def _cell(args):
    cfg, mode, strategy, seed = args
    if mode == "mrse":
        return run_mrse(cfg, seed, strategy)
    return run_otse(cfg, seed, strategy)


def _otse_seed_block(args):
    cfg, strategies, seed = args
    fleet = build_otse_fleet(cfg, seed)
    return [run_otse(cfg, seed, s, fleet) for s in strategies]


def run_baseline_grid(cfg: ExperimentConfig, strategies, seeds, mode: str = "otse", jobs: int = 1) -> list:
    """One report per (strategy, seed); OTSE cells with the same seed share one fleet."""
    strategies = [parse_strategy(s) if isinstance(s, str) else s for s in strategies]
    if not strategies:
        raise ValueError("need at least one strategy")
    seeds = list(seeds)
    if mode == "otse":
        blocks = [(cfg, strategies, s) for s in seeds]
        per_seed = _map(_otse_seed_block, blocks, jobs)
        by_key = {(r.strategy, r.seed): r for block in per_seed for r in block}
        return [by_key[(st.name, s)] for st in strategies for s in seeds]
    cells = [(cfg, mode, st, s) for st in strategies for s in seeds]
    return _map(_cell, cells, jobs)


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


SWEEP_KEYS = {
    "eta": "selection.eta",
    "np": "selection.n_p",
    "n_p": "selection.n_p",
    "b": "training.b",
    "m": "training.m",
    "gamma": "target.gamma",
    "omega": "selection.omega",
}


def run_sweep(cfg: ExperimentConfig, param: str, values, seeds, strategy=None, jobs: int = 1,
              collect: list | None = None) -> list:
    """Rows of ``report_row`` plus the swept value, one per (value, seed).

    Full reports are appended to ``collect`` when given.
    """
    key = SWEEP_KEYS.get(param, param)
    rows = []
    for v in values:
        v = _sweep_value(cfg, key, v)
        sub = cfg.replace(**{key: v})
        for rep in run_baseline_grid(sub, [_strategy(sub, strategy)], seeds, jobs=jobs):
            rows.append(report_row(rep, **{param: v}))
            if collect is not None:
                collect.append(rep)
    return rows


def _sweep_value(cfg: ExperimentConfig, key: str, raw):
    if "." not in key:
        raise InvalidInputError(f"cannot sweep {key!r}; use a dotted section.key")
    section, name = key.split(".", 1)
    try:
        current = getattr(getattr(cfg, section), name)
    except AttributeError:
        raise InvalidInputError(f"unknown sweep parameter {key!r}") from None
    if isinstance(current, bool):
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(raw, str) and raw.strip().lower() in ("auto", "none"):
        return None
    return float(raw)


def write_comparison(rows, path, extra_fields=()) -> None:
    fields = list(extra_fields) + list(COMPARISON_FIELDS)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fields})
