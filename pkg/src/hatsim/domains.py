"""Synthetic heterogeneous domains.

Every domain draws class-conditional Gaussians around shared class
prototypes, then applies its own rotate-scale-translate covariate shift and
keeps only a subset of the classes. Ground-truth labels of unlabeled,
validation and test samples live in a separate :class:`HiddenLabels` object
that only evaluators read.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

UNLABELED = -1
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class GlobalTaskSpec:
    num_classes: int
    input_dim: int
    class_prototypes: np.ndarray
    within_class_stddev: float
    seed: int


def make_task(num_classes: int, input_dim: int, within_class_stddev: float = 1.0,
              prototype_scale: float = 3.0, seed: int = 0, max_retries: int = 100) -> GlobalTaskSpec:
    """Draw class prototypes ``N(0, prototype_scale^2 I)`` at least ``2*stddev`` apart."""
    if num_classes < 2 or input_dim < 2:
        raise InvalidInputError("need at least 2 classes and 2 input dimensions")
    if within_class_stddev <= 0:
        raise InvalidInputError("within-class stddev must be positive")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        protos = rng.normal(0.0, prototype_scale, size=(num_classes, input_dim))
        if min_pairwise_distance(protos) >= 2 * within_class_stddev:
            return GlobalTaskSpec(num_classes, input_dim, protos, float(within_class_stddev), seed)
    raise RuntimeError(f"could not separate prototypes after {max_retries} draws")


def min_pairwise_distance(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    d = np.sqrt((diff ** 2).sum(-1))
    return float(d[np.triu_indices(len(points), k=1)].min())


@dataclass(frozen=True)
class DomainShiftSpec:
    rotation_angle: float = 0.0
    translation: tuple = ()
    scale: float = 1.0
    label_subset: tuple = ()
    plane_seed: int = 0

    def __post_init__(self):
        if self.scale <= 0:
            raise InvalidInputError("scale must be positive")
        if len(set(self.label_subset)) < 2:
            raise InvalidInputError("a domain needs at least two classes")

    def rotation_matrix(self, dim: int) -> np.ndarray:
        """Rotation by ``rotation_angle`` inside a seeded random 2-plane."""
        rng = np.random.default_rng(self.plane_seed)
        basis, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
        u, v = basis[:, 0], basis[:, 1]
        c, s = np.cos(self.rotation_angle), np.sin(self.rotation_angle)
        return (np.eye(dim) + (c - 1) * (np.outer(u, u) + np.outer(v, v))
                + s * (np.outer(v, u) - np.outer(u, v)))

    def apply(self, Z: np.ndarray) -> np.ndarray:
        t = np.zeros(Z.shape[1]) if len(self.translation) == 0 else np.asarray(self.translation, dtype=float)
        return self.scale * Z @ self.rotation_matrix(Z.shape[1]).T + t


def identity_shift(num_classes: int) -> DomainShiftSpec:
    return DomainShiftSpec(label_subset=tuple(range(num_classes)))


def random_shift(task: GlobalTaskSpec, rng: np.random.Generator, max_angle: float = 0.6,
                 max_translation: float = 1.0, scale_range=(0.8, 1.25),
                 n_labels: int | None = None) -> DomainShiftSpec:
    """Draw a random shift; ``n_labels`` classes are kept (all when ``None``)."""
    C, D = task.num_classes, task.input_dim
    k = C if n_labels is None else n_labels
    subset = tuple(sorted(int(c) for c in rng.choice(C, size=k, replace=False)))
    return DomainShiftSpec(
        rotation_angle=float(rng.uniform(-max_angle, max_angle)),
        translation=tuple(rng.normal(0.0, max_translation / np.sqrt(D), size=D)),
        scale=float(np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1])))),
        label_subset=subset,
        plane_seed=int(rng.integers(2**31)),
    )


class HiddenLabels:
    """Ground truth for every sample. Only evaluation code may read it."""

    def __init__(self, labels):
        self._labels = np.asarray(labels, dtype=np.int64)

    def __call__(self, idx) -> np.ndarray:
        return self._labels[idx]

    def __len__(self):
        return len(self._labels)


@dataclass
class DomainDataset:
    X: np.ndarray
    y: np.ndarray  # visible labels; UNLABELED where hidden
    label_space: tuple
    gamma: float
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    hidden: HiddenLabels = field(repr=False)
    domain_id: int = 0

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def labeled_idx(self) -> np.ndarray:
        return self.train[self.y[self.train] != UNLABELED]

    @property
    def unlabeled_idx(self) -> np.ndarray:
        return self.train[self.y[self.train] == UNLABELED]

    def labeled(self):
        idx = self.labeled_idx
        return self.X[idx], self.y[idx]

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def sample_domain(task: GlobalTaskSpec, shift: DomainShiftSpec, n: int, gamma: float,
                  seed: int, domain_id: int = 0) -> DomainDataset:
    """Draw ``n`` balanced samples from the classes of ``shift.label_subset``.

    Splits are a random 60/20/20 train/val/test partition and exactly
    ``round(gamma * |train|)`` train samples keep their labels.
    """
    if n < 10:
        raise InvalidInputError("n must be at least 10")
    if not 0 < gamma <= 1:
        raise InvalidInputError("gamma must lie in (0, 1]")
    classes = sorted(c for c in set(shift.label_subset) if 0 <= c < task.num_classes)
    if len(classes) < 2:
        raise InvalidInputError("label subset has fewer than two valid classes")
    if n < 2 * len(classes):
        raise InvalidInputError("n too small for the label subset")
    rng = np.random.default_rng(seed)

    counts = np.full(len(classes), n // len(classes))
    counts[: n % len(classes)] += 1
    labels = np.repeat(classes, counts)
    Z = task.class_prototypes[labels] + rng.normal(0.0, task.within_class_stddev, size=(n, task.input_dim))
    X = shift.apply(Z)

    perm = rng.permutation(n)
    n_train = round_half_up(SPLIT_FRACTIONS[0] * n)
    n_val = round_half_up(SPLIT_FRACTIONS[1] * n)
    train, val, test = np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:])
    if min(len(train), len(val), len(test)) == 0:
        raise InvalidInputError("n too small to populate all splits")

    n_labeled = round_half_up(gamma * len(train))
    keep = np.sort(rng.choice(train, size=n_labeled, replace=False))
    y = np.full(n, UNLABELED, dtype=np.int64)
    y[keep] = labels[keep]
    return DomainDataset(X, y, tuple(classes), float(gamma), train, val, test, HiddenLabels(labels), domain_id)


@dataclass(frozen=True)
class GroupLayout:
    groups: tuple  # tuple of tuples of domain ids

    @property
    def n_domains(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def assignment(self) -> list[int]:
        return [gi for gi, g in enumerate(self.groups) for _ in g]


def make_group_layout(domain_counts: Sequence[int]) -> GroupLayout:
    """Contiguous groups ``G(0), G(1), ...`` of the given sizes."""
    if not domain_counts or any(c < 1 for c in domain_counts):
        raise InvalidInputError("group sizes must be positive")
    groups, start = [], 0
    for c in domain_counts:
        groups.append(tuple(range(start, start + c)))
        start += c
    return GroupLayout(tuple(groups))


# -- CSV round trip ----------------------------------------------------------


def export_csv(ds: DomainDataset, path) -> None:
    """One row per sample: split, visible label (blank when hidden), features."""
    split_of = np.empty(len(ds.X), dtype=object)
    for name in ("train", "val", "test"):
        split_of[ds.split(name)] = name
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "label"] + [f"x{j}" for j in range(ds.input_dim)])
        for i, x in enumerate(ds.X):
            label = "" if ds.y[i] == UNLABELED else int(ds.y[i])
            w.writerow([split_of[i], label] + [repr(float(v)) for v in x])


def import_csv(path, label_space=None, gamma=None, domain_id: int = 0) -> DomainDataset:
    """Inverse of :func:`export_csv`. Hidden labels are unknown after import."""
    splits, labels, rows = [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            splits.append(row[0])
            labels.append(int(row[1]) if row[1] != "" else UNLABELED)
            rows.append([float(v) for v in row[2:]])
    X = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    splits = np.asarray(splits)
    train, val, test = (np.flatnonzero(splits == s) for s in ("train", "val", "test"))
    if label_space is None:
        label_space = tuple(sorted(set(y[y != UNLABELED].tolist())))
    if gamma is None:
        gamma = float(np.mean(y[train] != UNLABELED)) if len(train) else 1.0
    return DomainDataset(X, y, tuple(label_space), gamma, train, val, test,
                         HiddenLabels(y.copy()), domain_id)
