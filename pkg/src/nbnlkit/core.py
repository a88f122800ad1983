"""Shared types and descriptor-level operations.

Labels are 0-based everywhere inside the library. Files and the command line
use 1-based labels; conversion happens in :mod:`nbnlkit.formats`.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

STD_FLOOR = 1e-8


class InvalidInputError(ValueError):
    pass


class InvalidParameterError(ValueError):
    pass


class NumericalFailureError(ArithmeticError):
    pass


class FormatError(ValueError):
    """Malformed file. ``offset`` is the byte position where reading failed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def worker_count() -> int:
    """Parallelism cap from ``NBNLKIT_THREADS``, else the CPU count."""
    env = os.environ.get("NBNLKIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidParameterError(f"NBNLKIT_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


@dataclass(frozen=True)
class FeatureBag:
    """Descriptors of one image. ``patches`` is n x d, ``positions`` n x 2."""

    image_id: str
    patches: np.ndarray
    label: Optional[int] = None
    positions: Optional[np.ndarray] = None

    def __post_init__(self):
        patches = np.asarray(self.patches)
        if patches.ndim != 2 or patches.shape[0] < 1:
            raise InvalidInputError(
                f"bag {self.image_id!r}: patches must be a non-empty n x d matrix, got shape {patches.shape}")
        if not np.all(np.isfinite(patches)):
            raise InvalidInputError(f"bag {self.image_id!r}: non-finite descriptor entry")
        object.__setattr__(self, "patches", patches)
        if self.positions is not None:
            pos = np.asarray(self.positions)
            if pos.shape != (patches.shape[0], 2):
                raise InvalidInputError(
                    f"bag {self.image_id!r}: positions shape {pos.shape} != ({patches.shape[0]}, 2)")
            object.__setattr__(self, "positions", pos)
        if self.label is not None and self.label < 0:
            raise InvalidInputError(f"bag {self.image_id!r}: negative label {self.label}")

    @property
    def n(self) -> int:
        return self.patches.shape[0]

    @property
    def d(self) -> int:
        return self.patches.shape[1]

    def with_patches(self, patches: np.ndarray) -> "FeatureBag":
        return FeatureBag(self.image_id, patches, self.label, self.positions)


@dataclass(frozen=True)
class Dataset:
    bags: tuple
    d: int
    c: int

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))
        for bag in self.bags:
            if bag.d != self.d:
                raise InvalidInputError(
                    f"bag {bag.image_id!r} has dimension {bag.d}, dataset declares {self.d}")
            if bag.label is not None and bag.label >= self.c:
                raise InvalidInputError(
                    f"bag {bag.image_id!r} has label {bag.label + 1} but only {self.c} classes")

    @classmethod
    def from_bags(cls, bags: Sequence[FeatureBag], c: Optional[int] = None) -> "Dataset":
        bags = tuple(bags)
        if not bags:
            raise InvalidInputError("dataset needs at least one bag")
        if c is None:
            labels = [b.label for b in bags if b.label is not None]
            c = max(labels) + 1 if labels else 0
        return cls(bags, bags[0].d, c)

    @property
    def m(self) -> int:
        return len(self.bags)

    def __len__(self):
        return len(self.bags)

    def __iter__(self) -> Iterator[FeatureBag]:
        return iter(self.bags)

    def labels(self) -> np.ndarray:
        if any(b.label is None for b in self.bags):
            raise InvalidInputError("dataset contains unlabeled bags")
        return np.array([b.label for b in self.bags], dtype=np.int64)

    def map_patches(self, fn) -> "Dataset":
        return Dataset(tuple(b.with_patches(fn(b.patches)) for b in self.bags), self.d, self.c)


@dataclass(frozen=True)
class PrototypeTensor:
    """Prototypes ``W[:, i, y]`` for class ``y``, stored as a d x k x c array."""

    W: np.ndarray
    q: float = 2.0
    lam: float = 1.0

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 3:
            raise InvalidInputError(f"prototype tensor must be d x k x c, got shape {W.shape}")
        if not np.all(np.isfinite(W)):
            raise InvalidInputError("prototype tensor has non-finite entries")
        object.__setattr__(self, "W", W)

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def k(self) -> int:
        return self.W.shape[1]

    @property
    def c(self) -> int:
        return self.W.shape[2]


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray = field()

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        if mean.shape != std.shape or mean.ndim != 1:
            raise InvalidInputError("mean and std must be vectors of equal length")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def d(self) -> int:
        return self.mean.shape[0]


def cap_norm(x: np.ndarray) -> np.ndarray:
    """Scale ``x`` (or each row of a matrix) into the unit ball.

    Vectors already inside the ball are returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("cap_norm: non-finite entry")
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(1.0, norms)


def unit_norm(x: np.ndarray) -> np.ndarray:
    """Scale nonzero vectors (rows) to unit norm; zero vectors stay zero."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("unit_norm: non-finite entry")
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def fit_standardizer(train: Dataset) -> StandardizationStats:
    """Per-dimension mean and population std over every patch of every bag."""
    total = sum(b.n for b in train.bags) if len(train.bags) else 0
    if total == 0:
        raise InvalidInputError("fit_standardizer: empty dataset")
    # two passes, one bag at a time, so the patches are never concatenated
    mean = np.zeros(train.d)
    for bag in train.bags:
        mean += bag.patches.sum(axis=0)
    mean /= total
    sq = np.zeros(train.d)
    for bag in train.bags:
        sq += ((bag.patches - mean) ** 2).sum(axis=0)
    std = np.sqrt(sq / total)
    return StandardizationStats(mean, std)


def standardize(stats: StandardizationStats, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != stats.d:
        raise InvalidInputError(f"dimension {X.shape[-1]} does not match standardizer dimension {stats.d}")
    return (X - stats.mean) / stats.std


def apply_standardizer(stats: StandardizationStats, bag: FeatureBag) -> FeatureBag:
    return bag.with_patches(standardize(stats, bag.patches))


def nearest_neighbor(x: np.ndarray, Z: np.ndarray) -> tuple[int, float]:
    """Exact 1-NN of ``x`` among the rows of ``Z`` by squared Euclidean distance.

    Ties go to the lowest row index.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise InvalidInputError("nearest_neighbor: empty support")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (Z.shape[1],):
        raise InvalidInputError(f"nearest_neighbor: query dimension {x.shape} vs support {Z.shape[1]}")
    dist = ((Z - x) ** 2).sum(axis=1)
    i = int(np.argmin(dist))
    return i, float(dist[i])
