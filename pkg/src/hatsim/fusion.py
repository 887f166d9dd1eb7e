"""Sample-wise fusion of source predictions with an attention mixer.

The target feature is projected to a query, each source feature through its
own key projection, and the softmax of the query-key dot products weights the
sources' class probabilities after they are mapped into the global label
space. Source encoders stay frozen; only the mixer projections and copies of
the source classifiers are trained.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, NumericError
from .nn import SGD, Dense, LayerSpec, NetModel, softmax, softmax_backward
from .transport import TrafficLedger

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LabelMap:
    """Per-source local index -> global class id."""

    indices: tuple
    num_classes: int

    def __post_init__(self):
        for idx in self.indices:
            idx = np.asarray(idx)
            if len(set(idx.tolist())) != len(idx):
                raise InvalidInputError("label map must be injective")
            if idx.size and (idx.min() < 0 or idx.max() >= self.num_classes):
                raise InvalidInputError("mapped class id out of range")

    @classmethod
    def from_models(cls, models: Sequence[NetModel], num_classes: int) -> "LabelMap":
        return cls(tuple(tuple(m.label_space) for m in models), num_classes)

    def matrix(self, i: int) -> np.ndarray:
        idx = self.indices[i]
        M = np.zeros((len(idx), self.num_classes))
        M[np.arange(len(idx)), idx] = 1.0
        return M


def map_prediction(local_probs, label_map: LabelMap, source_index: int) -> np.ndarray:
    """Zero-pad local class probabilities into the global label space."""
    p = np.asarray(local_probs, dtype=np.float64)
    idx = np.asarray(label_map.indices[source_index])
    if p.shape[-1] != len(idx):
        raise InvalidInputError("local distribution does not match the source's label space")
    out = np.zeros(p.shape[:-1] + (label_map.num_classes,))
    out[..., idx] = p
    return out


class MixerState:
    """Query projection for the target feature and one key projection per source."""

    def __init__(self, target_dim: int, source_dims: Sequence[int], d_common: int = 32,
                 rng: np.random.Generator | None = None, query: Dense | None = None, keys=None):
        self.d_common = d_common
        self.query = query or Dense(LayerSpec(target_dim, d_common, "identity"), rng=rng)
        self.keys = list(keys) if keys is not None else [
            Dense(LayerSpec(d, d_common, "identity"), rng=rng) for d in source_dims]
        if any(k.spec.output_dim != self.query.spec.output_dim for k in self.keys):
            raise InvalidInputError("all projections must share the common dimension")

    @property
    def n_sources(self) -> int:
        return len(self.keys)

    def parameters(self):
        return self.query.parameters() + [p for k in self.keys for p in k.parameters()]


def _check_sources(mixer: MixerState, h_sources):
    if len(h_sources) != mixer.n_sources:
        raise InvalidInputError(f"mixer has {mixer.n_sources} keys, got {len(h_sources)} source features")


def attention_weights(mixer: MixerState, h_target, h_sources) -> np.ndarray:
    """``softmax_i(q . key_i)``; a vector for one sample, ``(n, N_p)`` for a batch."""
    _check_sources(mixer, h_sources)
    single = np.ndim(h_target) == 1
    q, _ = mixer.query.forward(np.atleast_2d(h_target))
    scores = np.stack([np.sum(q * k.forward(np.atleast_2d(h))[0], axis=1)
                       for k, h in zip(mixer.keys, h_sources)], axis=1)
    w = softmax(scores, axis=1)
    return w[0] if single else w


@dataclass
class FusedPrediction:
    weights: np.ndarray
    p_mix: np.ndarray


def fuse(mixer: MixerState, h_target, h_sources, classifiers: Sequence[Dense],
         label_map: LabelMap) -> FusedPrediction:
    """Attention-weighted convex combination of the mapped source distributions."""
    single = np.ndim(h_target) == 1
    p, cache = _forward(mixer, np.atleast_2d(h_target), [np.atleast_2d(h) for h in h_sources],
                        classifiers, label_map)
    w = cache["A"]
    return FusedPrediction(w[0], p[0]) if single else FusedPrediction(w, p)


def _forward(mixer, Hq, Hs, classifiers, label_map):
    _check_sources(mixer, Hs)
    if len(classifiers) != len(Hs) or len(label_map.indices) != len(Hs):
        raise InvalidInputError("need one classifier and one label map entry per source")
    q, _ = mixer.query.forward(Hq)
    K = [k.forward(h)[0] for k, h in zip(mixer.keys, Hs)]
    A = softmax(np.stack([np.sum(q * k, axis=1) for k in K], axis=1), axis=1)
    P = [softmax(c.forward(h)[0], axis=1) for c, h in zip(classifiers, Hs)]
    Maps = [label_map.matrix(i) for i in range(len(Hs))]
    Ms = [p @ m for p, m in zip(P, Maps)]
    p_mix = sum(A[:, i, None] * Ms[i] for i in range(len(Hs)))
    return p_mix, dict(Hq=Hq, Hs=Hs, q=q, K=K, A=A, P=P, Maps=Maps, Ms=Ms)


def mixer_loss(mixer: MixerState, classifiers: Sequence[Dense], label_map: LabelMap,
               h_target, h_sources, y):
    """Mean ``-ln p_mix[y]`` and gradients for mixer then classifier parameters."""
    Hq = np.atleast_2d(h_target)
    Hs = [np.atleast_2d(h) for h in h_sources]
    y = np.atleast_1d(y)
    n = len(y)
    if n == 0:
        raise InvalidInputError("empty batch")
    p, c = _forward(mixer, Hq, Hs, classifiers, label_map)
    rows = np.arange(n)
    py = p[rows, y]
    loss = -np.mean(np.log(np.maximum(py, PROB_FLOOR)))

    dp = np.zeros_like(p)
    dp[rows, y] = np.where(py > PROB_FLOOR, -1.0 / (n * np.maximum(py, PROB_FLOOR)), 0.0)
    A, q = c["A"], c["q"]
    dA = np.stack([np.sum(dp * M, axis=1) for M in c["Ms"]], axis=1)
    dS = softmax_backward(A, dA, axis=1)
    dq = sum(dS[:, i, None] * k for i, k in enumerate(c["K"]))
    grads = [dq.T @ Hq, dq.sum(axis=0)]
    for i, h in enumerate(Hs):
        dK = dS[:, i, None] * q
        grads += [dK.T @ h, dK.sum(axis=0)]
    for i, h in enumerate(Hs):
        dP = (A[:, i, None] * dp) @ c["Maps"][i].T
        dZ = softmax_backward(c["P"][i], dP, axis=1)
        grads += [dZ.T @ h, dZ.sum(axis=0)]
    return loss, grads


def mixer_parameters(mixer: MixerState, classifiers: Sequence[Dense]):
    return mixer.parameters() + [p for c in classifiers for p in c.parameters()]


def mixer_update(mixer: MixerState, classifiers: Sequence[Dense], label_map: LabelMap,
                 h_target, h_sources, y, optimizer: SGD) -> float:
    """One optimizer step on the fused cross-entropy of a labeled batch."""
    if len(np.atleast_1d(y)) == 0:
        raise InvalidInputError("empty batch")
    loss, grads = mixer_loss(mixer, classifiers, label_map, h_target, h_sources, y)
    if not np.isfinite(loss):
        raise NumericError("non-finite mixer loss")
    tape = optimizer.tape()
    tape.record(grads)
    optimizer.step(tape)
    return float(loss)


def fused_accuracy(p_mix, y) -> float:
    return float(np.mean(np.argmax(p_mix, axis=1) == np.asarray(y)))


class StaticFusion:
    """Fixed global weights over unadapted source classifiers (equal / nearest / weighted)."""

    def __init__(self, weights, classifiers: Sequence[Dense], label_map: LabelMap):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or len(w) != len(classifiers) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise InvalidInputError("static weights must form a distribution over the sources")
        self.weights = w
        self.classifiers = list(classifiers)
        self.label_map = label_map

    def predict(self, h_sources) -> FusedPrediction:
        Hs = [np.atleast_2d(h) for h in h_sources]
        p = sum(self.weights[i] * map_prediction(softmax(c.forward(h)[0], axis=1), self.label_map, i)
                for i, (c, h) in enumerate(zip(self.classifiers, Hs)))
        return FusedPrediction(np.tile(self.weights, (len(p), 1)), p)


class FeatureCache:
    """Write-once store of frozen source-encoder outputs keyed by (source index, sample id)."""

    def __init__(self, features: Sequence[np.ndarray], sample_ids):
        self.sample_ids = np.asarray(sample_ids)
        self._row = {int(s): r for r, s in enumerate(self.sample_ids)}
        self._features = []
        for f in features:
            f = np.array(f)
            f.flags.writeable = False
            self._features.append(f)

    @property
    def n_sources(self) -> int:
        return len(self._features)

    def rows(self, ids) -> np.ndarray:
        return np.fromiter((self._row[int(i)] for i in ids), dtype=np.int64, count=len(ids))

    def get(self, source_index: int, ids) -> np.ndarray:
        return self._features[source_index][self.rows(ids)]

    def batch(self, ids) -> list[np.ndarray]:
        r = self.rows(ids)
        return [f[r] for f in self._features]


def precompute_source_features(models: Sequence[NetModel], X, sample_ids, ledger: TrafficLedger | None = None) -> FeatureCache:
    """Run every frozen source encoder once over all target samples."""
    for m in models:
        if not m.frozen:
            raise InvalidInputError("source encoders must be frozen before caching")
    feats = [m.encode(X) for m in models]
    if ledger is not None:
        ledger.count_inference(len(X) * len(models))
    return FeatureCache(feats, sample_ids)


def export_weights(path, sample_ids, weights, source_ids=None) -> None:
    """Debug dump: one row per sample with its weight on every source."""
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if len(sample_ids) != len(w):
        raise InvalidInputError("one weight row per sample id")
    names = [f"w_{s}" for s in (source_ids if source_ids is not None else range(w.shape[1]))]
    if len(names) != w.shape[1]:
        raise InvalidInputError("one source id per weight column")
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["sample_id", *names])
        for sid, row in zip(sample_ids, w):
            out.writerow([int(sid), *(repr(float(x)) for x in row)])
