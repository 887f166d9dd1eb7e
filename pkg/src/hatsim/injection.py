"""Knowledge dictionary, adaptive distillation weight and the joint training loop."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .domains import DomainDataset, round_half_up
from .errors import InvalidInputError, NumericError
from .fusion import (
    LabelMap,
    MixerState,
    StaticFusion,
    fuse,
    fused_accuracy,
    mixer_parameters,
    mixer_update,
    precompute_source_features,
)
from .nn import SGD, NetModel, ce_loss_hard, ce_loss_soft
from .transport import TrafficLedger

INJECTIONS = ("hat_adaptive", "fixed_alpha", "none")
FUSIONS = ("hat_mixer", "equal", "nearest", "weighted")


@dataclass(frozen=True)
class AdaptiveLearnerConfig:
    m: float = 2.0
    b: float = 0.3

    def __post_init__(self):
        if self.m <= 0:
            raise InvalidInputError("m must be positive")
        if not 0 <= self.b <= 1:
            raise InvalidInputError("b must lie in [0, 1]")


def adaptive_alpha(acc_train: float, cfg: AdaptiveLearnerConfig) -> float:
    """Distillation weight ``max(0, m * (acc - b))``."""
    if not 0 <= acc_train <= 1:
        raise InvalidInputError("accuracy must lie in [0, 1]")
    return max(0.0, cfg.m * (acc_train - cfg.b))


@dataclass(frozen=True)
class TrainLoopConfig:
    epochs_target: int = 200
    epochs_mixer: int = 100
    unlabeled_ratio: float = 1.0
    lr_target: float = 0.1
    lr_mixer: float = 0.1
    d_common: int = 32
    fixed_alpha: float = 1.0
    kd_full_refresh: bool = False
    distill_labeled: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs_target < 0 or self.epochs_mixer < 0:
            raise InvalidInputError("epoch counts must be non-negative")
        if self.unlabeled_ratio <= 0 or self.lr_target < 0 or self.lr_mixer < 0:
            raise InvalidInputError("ratios and learning rates must be positive")


class KnowledgeDictionary:
    """Soft pseudo-labels per sample id, written only when the mixer improves."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.entries: dict[int, np.ndarray] = {}
        self.best_mixer_acc = 0.0
        self.writes = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, sample_id):
        return int(sample_id) in self.entries

    def lookup(self, ids):
        """``(ids_present, targets)`` for the ids that have entries."""
        present = [int(i) for i in ids if int(i) in self.entries]
        if not present:
            return np.array([], dtype=np.int64), np.zeros((0, self.num_classes))
        return np.asarray(present), np.stack([self.entries[i] for i in present])


def kd_update(kd: KnowledgeDictionary, ids, predictions, current_mixer_acc: float) -> bool:
    """Store fused predictions for ``ids`` iff ``current_mixer_acc`` beats the watermark.

    ``predictions`` is an ``(n, C)`` array or a zero-argument callable returning one,
    so nothing is computed when the watermark blocks the write.
    """
    if not current_mixer_acc > kd.best_mixer_acc:
        return False
    P = predictions() if callable(predictions) else predictions
    P = np.asarray(P, dtype=np.float64)
    if P.shape != (len(ids), kd.num_classes):
        raise InvalidInputError("prediction block does not match ids / class count")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidInputError("KD entries must be probability vectors")
    kd.best_mixer_acc = float(current_mixer_acc)
    for i, p in zip(ids, P):
        kd.entries[int(i)] = p.copy()
    kd.writes += 1
    return True


@dataclass
class TargetLoss:
    total: float
    label: float
    distill: float
    n_distill: int
    grads: list


def target_loss(model: NetModel, X_lab, y_lab, X_unl, kd_targets, alpha: float) -> TargetLoss:
    """Hard CE on the labeled batch plus ``alpha`` x soft CE on unlabeled samples with KD entries.

    ``y_lab`` indexes the model's label space; ``kd_targets`` rows align with
    ``X_unl`` and are distributions over the same space.
    """
    if alpha < 0:
        raise InvalidInputError("alpha must be non-negative")
    if len(y_lab) == 0:
        raise InvalidInputError("empty labeled batch")
    logits, cache = model.forward(X_lab)
    l_label, dz = ce_loss_hard(logits, y_lab)
    grads = model.backward(cache, dz)
    l_dist, n_dist = 0.0, 0 if X_unl is None else len(X_unl)
    if n_dist:
        logits_u, cache_u = model.forward(X_unl)
        l_dist, dz_u = ce_loss_soft(logits_u, kd_targets)
        if alpha > 0:
            grads = [g + gd for g, gd in zip(grads, model.backward(cache_u, alpha * dz_u))]
    return TargetLoss(float(l_label + alpha * l_dist), float(l_label), float(l_dist), n_dist, grads)


def evaluate(model: NetModel, X, y_true) -> float:
    """Arg-max accuracy in global class ids."""
    if len(X) == 0:
        raise InvalidInputError("cannot evaluate on an empty split")
    return float(np.mean(model.predict(X) == np.asarray(y_true)))


def evaluate_split(model: NetModel, ds: DomainDataset, split: str = "test") -> float:
    idx = ds.split(split)
    return evaluate(model, ds.X[idx], ds.hidden(idx))


class UnlabeledSampler:
    """Seeded draws without replacement that sweep a shuffled pass before repeating."""

    def __init__(self, ids, size: int, rng: np.random.Generator):
        self.ids = np.asarray(ids)
        self.size = min(size, len(self.ids))
        self.rng = rng
        self._queue = np.array([], dtype=self.ids.dtype)

    def next(self) -> np.ndarray:
        if self.size == 0:
            return self.ids[:0]
        if len(self._queue) < self.size:
            fresh = self.rng.permutation(self.ids)
            fresh = fresh[~np.isin(fresh, self._queue)]
            self._queue = np.concatenate([self._queue, fresh])
        batch, self._queue = self._queue[: self.size], self._queue[self.size:]
        return np.sort(batch)


@dataclass
class JointTrainResult:
    model: NetModel
    history: list = field(default_factory=list)
    kd: KnowledgeDictionary | None = None
    pseudo_ids: np.ndarray | None = None
    pseudo_probs: np.ndarray | None = None  # final fused predictions on unlabeled train data
    pseudo_weights: np.ndarray | None = None  # per-sample source weights behind pseudo_probs


class _MixerTeacher:
    trainable = True

    def __init__(self, models, label_map, target_dim, cfg: TrainLoopConfig, rng):
        self.mixer = MixerState(target_dim, [m.feature_dim for m in models], cfg.d_common, rng=rng)
        self.classifiers = [m.classifier.copy() for m in models]
        self.label_map = label_map
        self.opt = SGD(mixer_parameters(self.mixer, self.classifiers), cfg.lr_mixer)

    def update(self, h_t, h_s, y):
        return mixer_update(self.mixer, self.classifiers, self.label_map, h_t, h_s, y, self.opt)

    def fused(self, h_t, h_s):
        return fuse(self.mixer, h_t, h_s, self.classifiers, self.label_map)

    def predict(self, h_t, h_s):
        return self.fused(h_t, h_s).p_mix

    def close(self):
        self.opt.release()


class _StaticTeacher:
    trainable = False

    def __init__(self, fusion: StaticFusion):
        self.fusion = fusion

    def fused(self, h_t, h_s):
        return self.fusion.predict(h_s)

    def predict(self, h_t, h_s):
        return self.fused(h_t, h_s).p_mix

    def close(self):
        pass


def static_weights(fusion: str, n_sources: int, accuracies: Sequence[float] | None = None) -> np.ndarray:
    if fusion == "equal":
        return np.full(n_sources, 1.0 / n_sources)
    if fusion == "nearest":
        w = np.zeros(n_sources)
        w[0] = 1.0
        return w
    if fusion == "weighted":
        acc = np.asarray(accuracies, dtype=np.float64)
        if acc.sum() <= 0:
            return np.full(n_sources, 1.0 / n_sources)
        return acc / acc.sum()
    raise InvalidInputError(f"{fusion!r} is not a static fusion")


def joint_train(target_model: NetModel, sources: Sequence[NetModel], target: DomainDataset,
                cfg: TrainLoopConfig, learner: AdaptiveLearnerConfig | None = None,
                fusion: str = "hat_mixer", injection: str = "hat_adaptive",
                ledger: TrafficLedger | None = None, source_accuracies=None,
                on_epoch: Callable[[dict], None] | None = None) -> JointTrainResult:
    """Train ``target_model`` in place, distilling fused knowledge from frozen ``sources``.

    Per epoch: encode the labeled set and a fresh unlabeled sample with the
    target encoder, take one mixer step on the labeled data while mixer epochs
    remain, take one target step on the adaptive loss, then refresh the
    knowledge dictionary if the mixer's labeled accuracy improved.

    With ``injection="none"`` no source is touched and the loop is plain
    supervised training.
    """
    if fusion not in FUSIONS:
        raise InvalidInputError(f"unknown fusion {fusion!r}")
    if injection not in INJECTIONS:
        raise InvalidInputError(f"unknown injection {injection!r}")
    C = len(target_model.label_space)
    if tuple(target_model.label_space) != tuple(range(C)):
        raise InvalidInputError("target model must cover the global label space 0..C-1")
    if injection == "hat_adaptive" and learner is None:
        raise InvalidInputError("adaptive injection needs an AdaptiveLearnerConfig")

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    mixer_rng, sample_rng = (np.random.default_rng(s) for s in seeds)
    lab = target.labeled_idx
    unl = target.unlabeled_idx
    if len(lab) == 0:
        raise InvalidInputError("target has no labeled training data")
    X_lab, y_lab = target.X[lab], target.y[lab]
    val = target.val
    distill = injection != "none"

    teacher = cache = kd = None
    if distill:
        if not sources:
            raise InvalidInputError("distillation needs at least one source model")
        label_map = LabelMap.from_models(sources, C)
        cache = precompute_source_features(sources, target.X[target.train], target.train, ledger)
        if fusion == "hat_mixer":
            teacher = _MixerTeacher(sources, label_map, target_model.feature_dim, cfg, mixer_rng)
        else:
            w = static_weights(fusion, len(sources), source_accuracies)
            teacher = _StaticTeacher(StaticFusion(w, [m.classifier for m in sources], label_map))
        kd = KnowledgeDictionary(C)
        h_s_lab = cache.batch(lab)

    sampler = UnlabeledSampler(unl, round_half_up(cfg.unlabeled_ratio * len(lab)), sample_rng)
    opt = SGD(target_model.parameters(), cfg.lr_target)
    tape = opt.tape()
    history = []
    try:
        for epoch in range(cfg.epochs_target):
            row = {"epoch": epoch, "mixer_acc": float("nan"), "alpha": 0.0}
            alpha = 0.0
            if distill:
                batch_u = sampler.next()
                h_t_lab = target_model.encode(X_lab)
                h_t_unl = target_model.encode(target.X[batch_u]) if len(batch_u) else None
                if teacher.trainable and epoch < cfg.epochs_mixer:
                    row["mixer_loss"] = teacher.update(h_t_lab, h_s_lab, y_lab)
                mixer_acc = fused_accuracy(teacher.predict(h_t_lab, h_s_lab), y_lab)
                row["mixer_acc"] = mixer_acc
                if injection == "hat_adaptive":
                    alpha = adaptive_alpha(mixer_acc, learner)
                else:
                    alpha = cfg.fixed_alpha
                row["alpha"] = alpha
                distill_pool = np.concatenate([batch_u, lab]) if cfg.distill_labeled else batch_u
                ids_kd, targets_kd = kd.lookup(distill_pool)
                X_unl = target.X[ids_kd] if len(ids_kd) else None
            else:
                X_unl, targets_kd = None, None

            tl = target_loss(target_model, X_lab, y_lab, X_unl, targets_kd, alpha)
            if not np.isfinite(tl.total):
                raise NumericError(f"non-finite target loss at epoch {epoch}: label={tl.label} distill={tl.distill}")
            tape.record(tl.grads)
            opt.step(tape)

            if distill:
                refresh = cfg.kd_full_refresh or not teacher.trainable
                ids_w = unl if refresh else batch_u
                if len(ids_w):
                    if not teacher.trainable:
                        h_t_w = None
                    elif refresh:
                        h_t_w = target_model.encode(target.X[ids_w])
                    else:
                        h_t_w = h_t_unl
                    kd_update(kd, ids_w, lambda: teacher.predict(h_t_w, cache.batch(ids_w)), mixer_acc)
                row["kd_size"] = len(kd)
                row["best_mixer_acc"] = kd.best_mixer_acc
            row.update(label_loss=tl.label, distill_loss=tl.distill, n_distill=tl.n_distill,
                       val_acc=evaluate(target_model, target.X[val], target.hidden(val)) if len(val) else float("nan"))
            history.append(row)
            if on_epoch is not None:
                on_epoch(row)
    finally:
        opt.release()
        if teacher is not None:
            teacher.close()

    result = JointTrainResult(target_model, history, kd)
    if distill and len(unl):
        result.pseudo_ids = unl
        final = teacher.fused(target_model.encode(target.X[unl]), cache.batch(unl))
        result.pseudo_probs, result.pseudo_weights = final.p_mix, final.weights
    return result


HISTORY_FIELDS = ("epoch", "mixer_acc", "alpha", "label_loss", "distill_loss", "val_acc")


def export_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in HISTORY_FIELDS})
