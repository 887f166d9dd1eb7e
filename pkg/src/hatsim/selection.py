"""Two-stage source-model selection.

Stage one ranks every registered source by cosine similarity of cheap
per-dimension statistics and only the top fraction ships its model. Stage two
scores each received model on the target by (class-centroid similarity) x
(accuracy on the few labeled target samples).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .domains import DomainDataset
from .errors import InvalidInputError
from .nn import NetModel, entropy, softmax
from .transport import (
    SCALAR_MESSAGE_BYTES,
    MessageKind,
    ProtocolMessage,
    Registry,
    TrafficLedger,
    vector_bytes,
)

N_STATISTICS = 4


@dataclass(frozen=True)
class StatFeatureVector:
    mean: np.ndarray
    stddev: np.ndarray
    skewness: np.ndarray
    kurtosis: np.ndarray

    def vectors(self):
        return (self.mean, self.stddev, self.skewness, self.kurtosis)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def byte_size(self) -> int:
        return vector_bytes(*self.vectors())


def extract_stat_features(data) -> StatFeatureVector:
    """Per-dimension population mean, stddev, skewness and excess kurtosis.

    Dimensions with zero variance get skewness = kurtosis = 0.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InvalidInputError("need at least 2 samples in a (n, d) matrix")
    mean = X.mean(axis=0)
    dev = X - mean
    m2 = (dev ** 2).mean(axis=0)
    m3 = (dev ** 3).mean(axis=0)
    m4 = (dev ** 4).mean(axis=0)
    std = np.sqrt(m2)
    flat = m2 <= 1e-12 * np.maximum(1.0, mean ** 2)
    denom = np.where(flat, 1.0, std)
    skew = np.where(flat, 0.0, m3 / denom ** 3)
    kurt = np.where(flat, 0.0, m4 / denom ** 4 - 3.0)
    return StatFeatureVector(mean, np.where(flat, 0.0, std), skew, kurt)


def cosine(a, b) -> float:
    """Cosine similarity; 0 when either vector is all zeros."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def feature_similarity(l_source: StatFeatureVector, l_target: StatFeatureVector) -> float:
    if l_source.dim != l_target.dim:
        raise InvalidInputError("feature dimension mismatch")
    return sum(cosine(a, b) for a, b in zip(l_source.vectors(), l_target.vectors())) / N_STATISTICS


@dataclass
class ClassCentroidSet:
    centroids: dict
    feature_dim: int

    @property
    def covered_classes(self) -> frozenset:
        return frozenset(self.centroids)

    @property
    def byte_size(self) -> int:
        return vector_bytes(*self.centroids.values())


def keep_count(omega: float, k: int) -> int:
    return math.floor(omega * k + 1e-9)


def entropy_filter(logits, omega: float, groups=None) -> np.ndarray:
    """Indices of the ``floor(omega*K)`` lowest-entropy rows, in ascending entropy.

    With ``groups`` the cut is applied inside each group instead of globally.
    """
    e = entropy(softmax(logits, axis=1), axis=1)
    if groups is None:
        keep = keep_count(omega, len(e))
        if keep == 0:
            raise InvalidInputError(f"entropy filter keeps no samples (omega={omega}, K={len(e)})")
        return np.argsort(e, kind="stable")[:keep]
    kept = []
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        kept.append(idx[np.argsort(e[idx], kind="stable")[:keep_count(omega, len(idx))]])
    out = np.concatenate(kept)
    if out.size == 0:
        raise InvalidInputError("entropy filter keeps no samples")
    return out


def centroids_from_features(H, classes) -> ClassCentroidSet:
    H = np.asarray(H, dtype=np.float64)
    classes = np.asarray(classes)
    cents = {int(c): H[classes == c].mean(axis=0) for c in np.unique(classes)}
    return ClassCentroidSet(cents, H.shape[1])


def compute_centroids(model: NetModel, data, labels=None, omega: float = 0.75,
                      per_class: bool = False, features=None) -> ClassCentroidSet:
    """Mean encoder feature per class.

    With ``labels`` (global ids) samples are grouped by their true class and no
    filter is applied. Without labels each sample is pseudo-labelled by the
    classifier's arg-max and only the ``floor(omega*K)`` most confident samples
    (lowest softmax entropy, ranked over all samples) are averaged.
    """
    H = model.encode(data) if features is None else np.asarray(features)
    if H.ndim != 2 or len(H) == 0:
        raise InvalidInputError("centroids need a non-empty batch")
    if labels is not None:
        return centroids_from_features(H, labels)
    logits = model.classify(H)
    pseudo = np.asarray(model.label_space)[np.argmax(logits, axis=1)]
    keep = entropy_filter(logits, omega, pseudo if per_class else None)
    return centroids_from_features(H[keep], pseudo[keep])


def source_centroids(model: NetModel, dataset: DomainDataset) -> ClassCentroidSet:
    """Centroids a source computes on its own labeled training data."""
    X, y = dataset.labeled()
    if len(X) == 0:
        raise InvalidInputError(f"source {dataset.domain_id} has no labeled data")
    mask = np.isin(y, model.label_space)
    return centroids_from_features(model.encode(X[mask]), y[mask])


def centroid_similarity(target_c: ClassCentroidSet, source_c: ClassCentroidSet) -> float:
    """Mean cosine over classes covered by both sets; -1 when none overlap."""
    if target_c.feature_dim != source_c.feature_dim:
        raise InvalidInputError("centroid feature dims differ")
    shared = sorted(target_c.covered_classes & source_c.covered_classes)
    if not shared:
        return -1.0
    return sum(cosine(target_c.centroids[m], source_c.centroids[m]) for m in shared) / len(shared)


@dataclass(frozen=True)
class SelectionConfig:
    eta: float = 0.25
    omega: float = 0.75
    n_p: int = 3
    per_class_entropy: bool = False
    target_true_labels: bool = False

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise InvalidInputError("eta must lie in (0, 1]")
        if not 0 < self.omega <= 1:
            raise InvalidInputError("omega must lie in (0, 1]")
        if self.n_p < 1:
            raise InvalidInputError("n_p must be >= 1")


def coarse_count(eta: float, n_sources: int) -> int:
    # round() absorbs float noise such as 0.07 * 100 = 7.000000000000001
    return min(n_sources, max(1, math.ceil(round(eta * n_sources, 9))))


@dataclass
class Received:
    """A model delivered to the target, optionally with the source's centroids."""
    domain_id: int
    model: NetModel
    centroids: ClassCentroidSet | None = None


@dataclass
class SelectionOutcome:
    coarse_ids: list
    final_ids: list
    scores: dict = field(default_factory=dict)  # id -> {s_i, acc, s_fine, joint}
    traffic: dict = field(default_factory=dict)
    received: dict = field(default_factory=dict, repr=False)  # id -> Received

    def models(self) -> list[NetModel]:
        return [self.received[i].model for i in self.final_ids]

    def to_dict(self) -> dict:
        return {
            "coarse_ids": list(self.coarse_ids),
            "final_ids": list(self.final_ids),
            "scores": {str(k): v for k, v in sorted(self.scores.items())},
            "traffic": self.traffic,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def rank_scores(scores: dict) -> list:
    """Ids by descending score; ties go to the smaller id."""
    return sorted(scores, key=lambda i: (-scores[i], i))


def _rank(scores: dict, key) -> list:
    return rank_scores({i: key(v) for i, v in scores.items()})


def request_models(ids, registry: Registry, target_id: int, ledger: TrafficLedger,
                   with_centroids: bool) -> dict:
    """ModelInquiry to each id; each answers with a ModelTransfer."""
    out = {}
    for i in ids:
        registry.send(ProtocolMessage(MessageKind.MODEL_INQUIRY, target_id, i, SCALAR_MESSAGE_BYTES), ledger)
        h = registry.get(i)
        cents = h.centroids if with_centroids else None
        size = h.model.byte_size + (cents.byte_size if cents is not None else 0)
        payload = Received(i, h.model, cents)
        out[i] = registry.send(ProtocolMessage(MessageKind.MODEL_TRANSFER, i, target_id, size, payload), ledger)
    return out


def coarse_select(target: StatFeatureVector, registry: Registry, cfg: SelectionConfig,
                  ledger: TrafficLedger, target_id: int, with_centroids: bool = True):
    """Feature announce -> similarity replies -> top ``ceil(eta*N)`` -> model transfer.

    Returns ``(candidate_ids, s_scores, received)``; ties go to the smaller id.
    """
    sources = registry.sources()
    if not sources:
        raise InvalidInputError("registry is empty")
    scores = {}
    for h in sources:
        announced = registry.send(
            ProtocolMessage(MessageKind.FEATURE_ANNOUNCE, target_id, h.domain_id, target.byte_size, target), ledger)
        s = feature_similarity(h.stat_features, announced)
        scores[h.domain_id] = registry.send(
            ProtocolMessage(MessageKind.SIMILARITY_REPLY, h.domain_id, target_id, SCALAR_MESSAGE_BYTES, s), ledger)
    keep = coarse_count(cfg.eta, len(sources))
    ids = _rank(scores, lambda s: s)[:keep]
    return ids, scores, request_models(ids, registry, target_id, ledger, with_centroids)


def candidate_accuracy(model: NetModel, H, y) -> float:
    """Share of labeled samples predicted correctly; classes outside the model's space count as wrong."""
    pred = np.asarray(model.label_space)[np.argmax(model.classify(H), axis=1)]
    return float(np.mean(pred == y))


def joint_select(candidates: dict, target: DomainDataset, cfg: SelectionConfig,
                 ledger: TrafficLedger, use_centroids: bool = True) -> SelectionOutcome:
    """Rank received candidates by ``s_fine * Acc`` (or ``Acc`` alone) and keep ``n_p``."""
    if not candidates:
        raise InvalidInputError("no candidates to select from")
    lab = target.labeled_idx
    if len(lab) == 0:
        raise InvalidInputError("target has no labeled data")
    train = target.train
    y_lab = target.y[lab]
    pos = np.searchsorted(train, lab)
    scores = {}
    for i in sorted(candidates):
        rec = candidates[i]
        H = rec.model.encode(target.X[train])
        ledger.count_inference(len(train))
        acc = candidate_accuracy(rec.model, H[pos], y_lab)
        entry = {"acc": acc}
        if use_centroids:
            if cfg.target_true_labels:
                tc = _centroids_with_labels(rec.model, H, pos, y_lab, cfg)
            else:
                tc = compute_centroids(rec.model, None, omega=cfg.omega,
                                       per_class=cfg.per_class_entropy, features=H)
            entry["s_fine"] = centroid_similarity(tc, rec.centroids)
            entry["joint"] = entry["s_fine"] * acc
        else:
            entry["joint"] = acc
        scores[i] = entry
    final = _rank(scores, lambda e: e["joint"])[: cfg.n_p]
    return SelectionOutcome(sorted(candidates), final, scores, ledger.snapshot(), dict(candidates))


def _centroids_with_labels(model, H, pos, y_lab, cfg):
    # labeled samples keep their true class; the rest are pseudo-labelled and entropy-filtered
    logits = model.classify(H)
    pseudo = np.asarray(model.label_space)[np.argmax(logits, axis=1)]
    rest = np.setdiff1d(np.arange(len(H)), pos)
    keep = rest[entropy_filter(logits[rest], cfg.omega)] if len(rest) else rest
    idx = np.concatenate([pos, keep])
    classes = np.concatenate([y_lab, pseudo[keep]])
    return centroids_from_features(H[idx], classes)


SELECTION_STRATEGIES = ("hat", "all", "accuracy_only", "random")


def select_sources(strategy: str, target: DomainDataset, registry: Registry, cfg: SelectionConfig,
                   ledger: TrafficLedger, rng: np.random.Generator | None = None) -> SelectionOutcome:
    """Run one selection protocol end to end for ``target``.

    * ``hat``: coarse feature selection at ``eta`` then centroid-accuracy ranking
    * ``all``: no coarse stage; every model is shipped, then centroid-accuracy ranking
    * ``accuracy_only``: every model is shipped and ranked by labeled accuracy
    * ``random``: ``n_p`` sources drawn uniformly, shipped and used unevaluated
    """
    tid = target.domain_id
    if strategy == "hat":
        feats = extract_stat_features(target.X[target.train])
        ids, s, received = coarse_select(feats, registry, cfg, ledger, tid)
        out = joint_select(received, target, cfg, ledger)
        for i in ids:
            out.scores[i]["s_i"] = s[i]
        out.coarse_ids = ids
    elif strategy == "all":
        ids = registry.source_ids()
        out = joint_select(request_models(ids, registry, tid, ledger, True), target, cfg, ledger)
    elif strategy == "accuracy_only":
        ids = registry.source_ids()
        out = joint_select(request_models(ids, registry, tid, ledger, False), target, cfg, ledger,
                           use_centroids=False)
    elif strategy == "random":
        if rng is None:
            raise InvalidInputError("random selection needs an rng")
        pool = registry.source_ids()
        ids = sorted(int(i) for i in rng.choice(pool, size=min(cfg.n_p, len(pool)), replace=False))
        received = request_models(ids, registry, tid, ledger, False)
        out = SelectionOutcome(ids, ids, {}, ledger.snapshot(), received)
    else:
        raise InvalidInputError(f"unknown selection strategy {strategy!r}")
    out.traffic = ledger.snapshot()
    return out
