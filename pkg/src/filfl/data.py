"""Federated task construction: synthetic clients, partitions, public data, availability."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import Dataset, RngStream

log = logging.getLogger(__name__)

PUBLIC_MODES = ("held-out-global", "per-client-slice", "external")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FederatedTask:
    """Client training sets, the server-held public set, and a global test set.

    ``optima`` holds the generating parameters of each client for synthetic
    tasks (empty otherwise); it is informational only.
    """

    clients: Mapping[int, Dataset]
    public: Dataset
    test: Dataset
    weights: Mapping[int, float]
    target: str = "regression"
    classes: int = 0
    optima: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if set(self.clients) != set(self.weights):
            raise DataError("client weights must cover exactly the client ids")
        if any(p < 0 for p in self.weights.values()):
            raise DataError("client weights must be non-negative")
        total = math.fsum(self.weights.values())
        if abs(total - 1.0) > 1e-12:
            raise DataError(f"client weights sum to {total!r}, not 1")

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def active_ids(self) -> list[int]:
        """Clients that hold data (and therefore positive weight)."""
        return [k for k in sorted(self.clients) if self.weights[k] > 0]


def size_weights(clients: Mapping[int, Dataset]) -> dict[int, float]:
    """``p_k = m_k / sum_j m_j``; clients with no data get weight 0."""
    total = sum(ds.size for ds in clients.values())
    if total == 0:
        raise DataError("all clients are empty")
    return {k: clients[k].size / total for k in sorted(clients)}


def _softmax_labels(gen: np.random.Generator, X: np.ndarray, W: np.ndarray) -> np.ndarray:
    z = X @ W.T
    z -= z.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    u = gen.random(len(X))[:, None]
    return np.minimum((probs.cumsum(axis=1) < u).sum(axis=1), W.shape[0] - 1)


def make_synthetic_convex_task(
    N: int,
    dim: int,
    per_client_size: int,
    heterogeneity: float,
    public_size: int,
    test_size: int,
    rng: RngStream,
    target: str = "regression",
    classes: int = 2,
    noise: float = 0.1,
    signal_scale: float = 1.0,
) -> FederatedTask:
    """Draw a task whose clients differ through their generating parameters.

    A shared optimum ``w*`` is drawn once; client ``k`` generates its data from
    ``w*_k = w* + heterogeneity * eps_k``. Regression targets are
    ``x . w*_k + noise * e``; classification labels are sampled from
    ``softmax(W*_k x)``. Public and test examples come from the client mixture
    (each example picks a client in proportion to ``p_k``) and are freshly
    drawn, so they never overlap any client's training set.
    """
    for name, value in (("N", N), ("dim", dim), ("per_client_size", per_client_size),
                        ("public_size", public_size), ("test_size", test_size)):
        if value < 1:
            raise DataError(f"{name} must be >= 1")
    if heterogeneity < 0:
        raise DataError("heterogeneity must be non-negative")
    if target not in ("regression", "classification"):
        raise DataError(f"unknown target {target!r}")
    gen = rng.generator()
    shape = (dim,) if target == "regression" else (classes, dim)
    w_star = signal_scale * gen.standard_normal(shape)
    optima = {k: w_star + heterogeneity * gen.standard_normal(shape) for k in range(N)}

    def draw(k_of_row: np.ndarray) -> Dataset:
        X = gen.standard_normal((len(k_of_row), dim))
        if target == "regression":
            W = np.stack([optima[k] for k in k_of_row])
            y = np.einsum("ij,ij->i", X, W) + noise * gen.standard_normal(len(k_of_row))
        else:
            y = np.empty(len(k_of_row), dtype=np.int64)
            for k in np.unique(k_of_row):
                rows = np.flatnonzero(k_of_row == k)
                y[rows] = _softmax_labels(gen, X[rows], optima[int(k)])
        return Dataset(X, y)

    clients = {k: draw(np.full(per_client_size, k)) for k in range(N)}
    weights = size_weights(clients)
    p = np.array([weights[k] for k in range(N)])
    public = draw(gen.choice(N, size=public_size, p=p))
    test = draw(gen.choice(N, size=test_size, p=p))
    return FederatedTask(clients, public, test, weights, target=target,
                         classes=classes if target == "classification" else 0, optima=optima)


def make_classification_source(
    size: int, dim: int, classes: int, rng: RngStream, signal_scale: float = 1.0, balanced: bool = True
) -> Dataset:
    """A pooled labeled source with one shared softmax model, for partitioning.

    With ``balanced`` the labels are assigned round-robin and features are
    drawn around class means, so each class has ``size // classes`` (+1) rows.
    """
    gen = rng.generator()
    if balanced:
        means = signal_scale * gen.standard_normal((classes, dim))
        y = np.arange(size) % classes
        X = means[y] + gen.standard_normal((size, dim))
        return Dataset(X, y.astype(np.int64))
    W = signal_scale * gen.standard_normal((classes, dim))
    X = gen.standard_normal((size, dim))
    return Dataset(X, _softmax_labels(gen, X, W))


def dirichlet_partition(source: Dataset, N: int, alpha: float, rng: RngStream) -> dict[int, Dataset]:
    """Split ``source`` across ``N`` clients with per-class ``Dir(alpha)`` proportions.

    Every example lands on exactly one client. Clients may come out empty for
    small ``alpha``; they are kept (so ids stay ``0..N-1``) and logged.
    """
    if N < 1:
        raise DataError("N must be >= 1")
    if not alpha > 0:
        raise DataError("alpha must be > 0")
    gen = rng.generator()
    labels = source.y.astype(np.int64)
    parts: list[list[np.ndarray]] = [[] for _ in range(N)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[gen.permutation(len(idx))]
        props = gen.dirichlet(np.full(N, alpha))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
        for k, chunk in enumerate(np.split(idx, cuts)):
            parts[k].append(chunk)
    out = {}
    for k in range(N):
        rows = np.sort(np.concatenate(parts[k])) if parts[k] else np.zeros(0, dtype=np.int64)
        out[k] = source.subset(rows)
    empty = [k for k, ds in out.items() if ds.size == 0]
    if empty:
        log.warning("dirichlet partition left %d empty client(s): %s", len(empty), empty)
    return out


def _count(total: int, fraction: float | None, size: int | None) -> int:
    if size is not None:
        count = int(size)
    elif fraction is not None:
        if not 0 < fraction < 1:
            raise DataError("fraction must be in (0, 1)")
        count = max(1, int(round(fraction * total)))
    else:
        raise DataError("give either a fraction or a size")
    if count < 1:
        raise DataError("public size must be >= 1")
    if count > total:
        raise DataError(f"requested {count} public examples but only {total} available")
    return count


def split_public(
    source: Dataset | Mapping[int, Dataset] | str | Path,
    mode: str,
    fraction: float | None = None,
    size: int | None = None,
    rng: RngStream | None = None,
    feature_count: int | None = None,
    label_kind: str = "class",
    skip_header: bool = False,
):
    """Carve out the server's public dataset.

    ``held-out-global``: draw ``fraction`` (or ``size``) examples from a pooled
    ``Dataset``; returns ``(public, remainder_dataset)``.

    ``per-client-slice``: take ``fraction`` of every client's data (at least one
    row from each non-empty client) and concatenate the slices in client-id
    order; returns ``(public, remaining_clients)``.

    ``external``: load a CSV file as-is; returns ``(public, None)``.
    """
    if mode == "held-out-global":
        if not isinstance(source, Dataset):
            raise DataError("held-out-global needs a pooled dataset")
        if rng is None:
            raise DataError("held-out-global needs an rng")
        count = _count(source.size, fraction, size)
        perm = rng.generator().permutation(source.size)
        return source.subset(np.sort(perm[:count])), source.subset(np.sort(perm[count:]))
    if mode == "per-client-slice":
        if not isinstance(source, Mapping):
            raise DataError("per-client-slice needs a client mapping")
        if fraction is None:
            raise DataError("per-client-slice needs a fraction")
        if rng is None:
            raise DataError("per-client-slice needs an rng")
        slices, rest = [], {}
        for k in sorted(source):
            ds = source[k]
            if ds.size == 0:
                rest[k] = ds
                continue
            count = _count(ds.size, fraction, None)
            perm = rng.child("client", k).generator().permutation(ds.size)
            slices.append(ds.subset(np.sort(perm[:count])))
            rest[k] = ds.subset(np.sort(perm[count:]))
        if not slices:
            raise DataError("no client data to slice")
        return Dataset.concat(slices), rest
    if mode == "external":
        if feature_count is None:
            raise DataError("external mode needs feature_count")
        return load_csv(source, feature_count, label_kind, skip_header=skip_header), None
    raise DataError(f"unknown public mode {mode!r}; expected one of {PUBLIC_MODES}")


@dataclass(frozen=True)
class AvailabilitySchedule:
    """Piecewise-constant available-client sets, one frozenset per round."""

    rounds: tuple[frozenset, ...]
    resample_period: int = 1

    def available(self, t: int) -> frozenset:
        return self.rounds[t]

    def __len__(self) -> int:
        return len(self.rounds)

    @classmethod
    def from_function(cls, fn: Callable[[int], Sequence[int]], T: int) -> AvailabilitySchedule:
        """Custom schedule hook for stress tests."""
        return cls(tuple(frozenset(fn(t)) for t in range(T)), resample_period=1)


def make_availability(
    N: int, n: int, resample_period: int, T: int, rng: RngStream, eligible: Sequence[int] | None = None
) -> AvailabilitySchedule:
    """Draw ``n`` clients without replacement every ``resample_period`` rounds.

    ``eligible`` restricts the pool (e.g. to clients that hold data); it
    defaults to ``range(N)``. If fewer than ``n`` clients are eligible all of
    them are available every round.
    """
    if n > N:
        raise DataError("n must not exceed N")
    if resample_period < 1:
        raise DataError("resample_period must be >= 1")
    ids = np.array(sorted(range(N) if eligible is None else eligible), dtype=np.int64)
    size = min(n, len(ids))
    gen = rng.generator()
    rounds = []
    current: frozenset = frozenset()
    for t in range(T):
        if t % resample_period == 0:
            current = frozenset(int(k) for k in gen.choice(ids, size=size, replace=False))
        rounds.append(current)
    return AvailabilitySchedule(tuple(rounds), resample_period)


def load_csv(path: str | Path, feature_count: int, label_kind: str = "class", skip_header: bool = False) -> Dataset:
    """Read ``feature_count`` real columns plus a trailing label per row.

    ``label_kind`` is ``"class"`` (non-negative integer index) or ``"real"``.
    Row numbers in error messages are 1-based file lines.
    """
    if label_kind not in ("class", "real"):
        raise DataError(f"unknown label kind {label_kind!r}")
    features, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if skip_header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != feature_count + 1:
                raise DataError(f"row {lineno}: expected {feature_count + 1} fields, got {len(row)}")
            try:
                x = [float(cell) for cell in row[:-1]]
                label = float(row[-1])
            except ValueError as exc:
                raise DataError(f"row {lineno}: {exc}") from None
            if not all(map(math.isfinite, x)) or not math.isfinite(label):
                raise DataError(f"row {lineno}: non-finite value")
            if label_kind == "class":
                if label != int(label) or label < 0:
                    raise DataError(f"row {lineno}: class label must be a non-negative integer")
                label = int(label)
            features.append(x)
            labels.append(label)
    if not features:
        raise DataError("empty dataset")
    dtype = np.int64 if label_kind == "class" else np.float64
    return Dataset(np.array(features, dtype=np.float64), np.array(labels, dtype=dtype))
