"""Numeric value types, averaging, and the seeded RNG contract.

Parameter vectors are plain 1-D float64 numpy arrays. Datasets are immutable
(features, labels) pairs. Every random draw in the simulator comes from an
:class:`RngStream`, which is addressed by ``(seed, path)`` so that a given
purpose (say, client 7's local training in round 12) always sees the same
random sequence no matter what else ran before it.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

ParamVector = np.ndarray

SUM_TOLERANCE = 1e-12


class NonFiniteError(ArithmeticError):
    """A parameter vector or loss picked up a NaN or infinity."""


def as_params(values: Iterable[float] | np.ndarray) -> ParamVector:
    """Coerce ``values`` into a finite 1-D float64 parameter vector."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    check_finite(arr)
    return arr


def check_finite(arr: np.ndarray, what: str = "parameters") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what}")
    return arr


def _exact_column_sum(rows: np.ndarray) -> np.ndarray:
    # fsum is correctly rounded, so the result does not depend on row order
    return np.array([math.fsum(col) for col in rows.T], dtype=np.float64)


def _stack(vectors: Sequence[np.ndarray]) -> np.ndarray:
    dims = {v.shape for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch: {sorted(d[0] for d in dims)}")
    return np.vstack(vectors)


def weighted_average(
    weights: Mapping[int, np.ndarray], coefficients: Mapping[int, float]
) -> ParamVector:
    """Convex combination ``sum_k c_k w_k`` over clients in ascending id order."""
    if set(weights) != set(coefficients):
        raise ValueError("coefficient keys must equal weight keys")
    if not weights:
        raise ValueError("cannot average an empty set of vectors")
    ids = sorted(weights)
    coefs = np.array([coefficients[k] for k in ids], dtype=np.float64)
    if np.any(coefs < 0):
        raise ValueError("coefficients must be non-negative")
    if abs(math.fsum(coefs) - 1.0) > SUM_TOLERANCE:
        raise ValueError(f"coefficients sum to {math.fsum(coefs)!r}, not 1")
    rows = _stack([np.asarray(weights[k], dtype=np.float64) for k in ids])
    return check_finite(_exact_column_sum(rows * coefs[:, None]))


def simple_average(vectors: Sequence[np.ndarray]) -> ParamVector:
    """Uniform mean of a non-empty collection of vectors."""
    vectors = list(vectors)
    if not vectors:
        raise ValueError("cannot average an empty set of vectors")
    rows = _stack([np.asarray(v, dtype=np.float64) for v in vectors])
    return check_finite(_exact_column_sum(rows) / len(vectors))


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of labeled examples.

    ``X`` has shape ``(m, feature_dim)``; ``y`` has shape ``(m,)`` and holds
    real targets (regression) or integer class indices (classification).
    """

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else X.reshape(0, 0)
        y = np.asarray(self.y).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def size(self) -> int:
        return int(self.X.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.X.shape[1]) if self.X.ndim == 2 else 0

    def __len__(self) -> int:
        return self.size

    def subset(self, idx: Sequence[int] | np.ndarray) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx])

    @classmethod
    def empty(cls, feature_dim: int, label_dtype=np.float64) -> Dataset:
        return cls(np.zeros((0, feature_dim)), np.zeros(0, dtype=label_dtype))

    @classmethod
    def concat(cls, parts: Sequence[Dataset]) -> Dataset:
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]))


def _label_key(label: Hashable) -> int:
    digest = hashlib.sha256(repr(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream.

    ``RngStream(seed).child("round", 3, "client", 7)`` always produces the same
    sequence. Labels are hashed with SHA-256 into the spawn key of a numpy
    ``SeedSequence`` feeding a PCG64 generator, both of which are specified
    bit-for-bit across platforms.
    """

    seed: int
    path: tuple = field(default=())

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def child(self, *labels: Hashable) -> RngStream:
        return RngStream(self.seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        key = tuple(_label_key(label) for label in self.path)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(self.seed), spawn_key=key)))
