"""Synthetic benchmark datasets.

Each class is an isotropic Gaussian cluster around a randomly placed
center. Train, test and attacker-side aux splits are drawn from the same
mixture through separate generator streams, so they are disjoint with
probability one while sharing the distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 10
    dim: int = 16
    train_per_class: int = 600
    test_per_class: int = 80
    aux_per_class: int = 1200
    spread: float = 1.0
    center_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if min(self.train_per_class, self.test_per_class, self.aux_per_class) < 1:
            raise ValueError("per-class sample counts must be positive")
        if self.spread < 0:
            raise ValueError("spread must be nonnegative")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("feature and label counts differ")

    def __len__(self):
        return self.X.shape[0]

    def one_hot(self) -> np.ndarray:
        T = np.zeros((len(self), self.n_classes))
        T[np.arange(len(self)), self.y] = 1.0
        return T

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.y == label)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.n_classes)


@dataclass
class DatasetSplits:
    train: Dataset
    test: Dataset
    aux: Dataset


def _draw_split(rng, centers, spread, per_class, n_classes, dim):
    n = per_class * n_classes
    X = np.empty((n, dim))
    y = np.empty(n, dtype=np.int64)
    for c in range(n_classes):
        lo = c * per_class
        X[lo : lo + per_class] = centers[c] + spread * rng.standard_normal(
            (per_class, dim)
        )
        y[lo : lo + per_class] = c
    order = rng.permutation(n)
    return Dataset(X[order], y[order], n_classes)


def generate_dataset(spec: DatasetSpec) -> DatasetSplits:
    """Three disjoint draws (train, test, aux) from one Gaussian mixture.

    spread = 0 degenerates every class to a single repeated point; the
    splits are still produced, profile building rejects them later.
    """
    root = np.random.SeedSequence(spec.seed)
    center_ss, train_ss, test_ss, aux_ss = root.spawn(4)
    centers = spec.center_scale * np.random.default_rng(
        center_ss
    ).standard_normal((spec.n_classes, spec.dim))
    train = _draw_split(
        np.random.default_rng(train_ss),
        centers,
        spec.spread,
        spec.train_per_class,
        spec.n_classes,
        spec.dim,
    )
    test = _draw_split(
        np.random.default_rng(test_ss),
        centers,
        spec.spread,
        spec.test_per_class,
        spec.n_classes,
        spec.dim,
    )
    aux = _draw_split(
        np.random.default_rng(aux_ss),
        centers,
        spec.spread,
        spec.aux_per_class,
        spec.n_classes,
        spec.dim,
    )
    return DatasetSplits(train, test, aux)
