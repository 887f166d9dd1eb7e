"""In-process network between target and source domains with byte-exact accounting."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

import numpy as np

from .domains import DomainDataset
from .errors import InvalidInputError, NoSkeletonFits, ProtocolError
from .nn import BYTES_PER_PARAM, LayerSpec, NetModel

# SimilarityReply carries one scalar, ModelInquiry one flag.
SCALAR_MESSAGE_BYTES = 8


class MessageKind(str, Enum):
    FEATURE_ANNOUNCE = "FeatureAnnounce"
    SIMILARITY_REPLY = "SimilarityReply"
    MODEL_INQUIRY = "ModelInquiry"
    MODEL_TRANSFER = "ModelTransfer"


@dataclass(frozen=True)
class DeviceConstraints:
    max_param_count: int
    max_flops_per_inference: int

    def __post_init__(self):
        if self.max_param_count <= 0 or self.max_flops_per_inference <= 0:
            raise InvalidInputError("device constraints must be positive")


@dataclass
class SourceDomainHandle:
    domain_id: int
    dataset: DomainDataset
    model: NetModel
    constraints: DeviceConstraints | None = None
    stat_features: Any = None  # selection.StatFeatureVector, filled on registration
    centroids: Any = None  # selection.ClassCentroidSet over the source's labeled data

    def __post_init__(self):
        if not self.model.frozen:
            raise ProtocolError(f"source {self.domain_id}: model must be trained and frozen before registration")


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    sender: int
    receiver: int
    payload_bytes: int
    payload: Any = field(default=None, compare=False)

    def __post_init__(self):
        if self.payload_bytes <= 0:
            raise InvalidInputError("payload_bytes must be positive")


class TrafficLedger:
    """Byte and encoder-inference counters for one experiment run."""

    def __init__(self):
        self.per_kind: Counter = Counter({k.value: 0 for k in MessageKind})
        self.source_encoder_inference_count = 0
        self.messages = 0

    @property
    def total_bytes(self) -> int:
        return sum(self.per_kind.values())

    def record(self, msg: ProtocolMessage):
        self.per_kind[MessageKind(msg.kind).value] += msg.payload_bytes
        self.messages += 1

    def count_inference(self, n: int):
        if n < 0:
            raise InvalidInputError("inference count increments must be non-negative")
        self.source_encoder_inference_count += int(n)

    def snapshot(self) -> dict:
        return {
            "total_bytes": self.total_bytes,
            "per_kind": dict(self.per_kind),
            "inference_count": self.source_encoder_inference_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True)


def count_inference(ledger: TrafficLedger, n_forward_passes: int) -> None:
    ledger.count_inference(n_forward_passes)


class Registry:
    """Source domains plus the set of known endpoints (sources and targets)."""

    def __init__(self):
        self._sources: dict[int, SourceDomainHandle] = {}
        self._targets: set[int] = set()

    def register_source(self, handle: SourceDomainHandle):
        if handle.domain_id in self._sources or handle.domain_id in self._targets:
            raise ProtocolError(f"duplicate domain id {handle.domain_id}")
        if handle.stat_features is None:
            from .selection import extract_stat_features
            handle.stat_features = extract_stat_features(handle.dataset.X[handle.dataset.train])
        if handle.centroids is None:
            from .selection import source_centroids
            handle.centroids = source_centroids(handle.model, handle.dataset)
        self._sources[handle.domain_id] = handle

    def register_target(self, domain_id: int):
        if domain_id in self._sources:
            raise ProtocolError(f"domain {domain_id} is already a source")
        self._targets.add(domain_id)

    def unregister_target(self, domain_id: int):
        self._targets.discard(domain_id)

    def sources(self) -> list[SourceDomainHandle]:
        return [self._sources[k] for k in sorted(self._sources)]

    def source_ids(self) -> list[int]:
        return sorted(self._sources)

    def get(self, domain_id: int) -> SourceDomainHandle:
        try:
            return self._sources[domain_id]
        except KeyError:
            raise ProtocolError(f"unknown source {domain_id}") from None

    def knows(self, domain_id: int) -> bool:
        return domain_id in self._sources or domain_id in self._targets

    def __len__(self):
        return len(self._sources)

    def __contains__(self, domain_id):
        return domain_id in self._sources

    def send(self, msg: ProtocolMessage, ledger: TrafficLedger):
        """Deliver synchronously and losslessly, charging the ledger."""
        for end in (msg.sender, msg.receiver):
            if not self.knows(end):
                raise ProtocolError(f"unknown endpoint {end}")
        ledger.record(msg)
        return msg.payload


def register_source(registry: Registry, handle: SourceDomainHandle) -> None:
    registry.register_source(handle)


def send(registry: Registry, msg: ProtocolMessage, ledger: TrafficLedger):
    return registry.send(msg, ledger)


def vector_bytes(*arrays) -> int:
    return BYTES_PER_PARAM * sum(int(np.size(a)) for a in arrays)


def skeleton_cost(skeleton: Sequence[LayerSpec], num_classes: int = 0) -> tuple[int, int]:
    """``(param_count, multiply-accumulates)`` of a layer stack, optionally with a linear head."""
    params = sum(s.param_count for s in skeleton)
    macs = sum(s.macs for s in skeleton)
    if num_classes:
        out = skeleton[-1].output_dim
        params += out * num_classes + num_classes
        macs += out * num_classes
    return params, macs


def pick_skeleton(library: Sequence[Sequence[LayerSpec]], zeta: DeviceConstraints,
                  num_classes: int = 0) -> tuple[LayerSpec, ...]:
    """Largest skeleton (by parameter count) that fits both device limits."""
    if not library:
        raise InvalidInputError("skeleton library is empty")
    best, best_params = None, -1
    for sk in library:
        params, macs = skeleton_cost(sk, num_classes)
        if params <= zeta.max_param_count and macs <= zeta.max_flops_per_inference and params > best_params:
            best, best_params = tuple(sk), params
    if best is None:
        raise NoSkeletonFits(f"no skeleton fits {zeta}")
    return best
