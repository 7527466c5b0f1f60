"""Client selection from the (filtered) pool: random, power-of-choice, and DivFL-style."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import ParamVector, RngStream

SELECTION_KINDS = ("rs-weighted-replacement", "rs-uniform-noreplace", "poc", "divfl")


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str
    K: int
    poc_d: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in SELECTION_KINDS:
            raise SelectionError(f"unknown selection kind {self.kind!r}")
        if self.K < 1:
            raise SelectionError("K must be >= 1")
        if self.poc_d is not None and self.poc_d < self.K:
            raise SelectionError("poc_d must be >= K")


def _renormalized(pool: Sequence[int], weights: Mapping[int, float] | None) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array(sorted(pool), dtype=np.int64)
    if weights is None:
        return ids, np.full(len(ids), 1.0 / len(ids))
    p = np.array([weights[int(k)] for k in ids], dtype=np.float64)
    total = math.fsum(p)
    if not total > 0:
        raise SelectionError("pool has zero total weight")
    return ids, p / total


def select_rs(
    pool: Sequence[int],
    weights: Mapping[int, float] | None,
    K: int,
    variant: str,
    rng: RngStream,
) -> list[int]:
    """Random selection.

    ``rs-weighted-replacement`` draws ``K`` ids i.i.d. with probability
    proportional to ``p_k`` over the pool (duplicates kept, returned sorted).
    ``rs-uniform-noreplace`` draws ``min(K, |pool|)`` distinct ids uniformly.
    """
    if not pool:
        raise SelectionError("pool is empty")
    gen = rng.generator()
    if variant == "rs-weighted-replacement":
        ids, p = _renormalized(pool, weights)
        return sorted(int(k) for k in gen.choice(ids, size=K, replace=True, p=p))
    if variant == "rs-uniform-noreplace":
        ids = np.array(sorted(pool), dtype=np.int64)
        return sorted(int(k) for k in gen.choice(ids, size=min(K, len(ids)), replace=False))
    raise SelectionError(f"unknown random-selection variant {variant!r}")


def poc_candidates(
    pool: Sequence[int], d: int, weights: Mapping[int, float] | None, rng: RngStream
) -> list[int]:
    """``min(d, |pool|)`` candidates drawn without replacement in proportion to ``p_k``."""
    ids, p = _renormalized(pool, weights)
    size = min(d, len(ids))
    if np.count_nonzero(p) < size:
        raise SelectionError("not enough clients with positive weight for the candidate set")
    return sorted(int(k) for k in rng.generator().choice(ids, size=size, replace=False, p=p))


def top_k_by_loss(candidates: Sequence[int], K: int, losses: Mapping[int, float]) -> list[int]:
    missing = [k for k in candidates if k not in losses]
    if missing:
        raise SelectionError(f"no loss for candidate(s) {missing}")
    ranked = sorted(candidates, key=lambda k: (-losses[k], k))
    return sorted(ranked[:K])


def select_poc(
    pool: Sequence[int],
    K: int,
    d: int,
    losses: Mapping[int, float],
    rng: RngStream,
    weights: Mapping[int, float] | None = None,
) -> list[int]:
    """Power-of-choice: sample ``d`` candidates, keep the ``K`` with the highest local loss.

    Ties go to the lower client id.
    """
    if d < K:
        raise SelectionError("d must be >= K")
    return top_k_by_loss(poc_candidates(pool, d, weights, rng), K, losses)


def facility_cost(distances: np.ndarray, chosen: Sequence[int]) -> float:
    """``sum_i min_{j in chosen} distances[i, j]`` over all pool rows."""
    return float(distances[:, list(chosen)].min(axis=1).sum())


def select_divfl(
    pool: Sequence[int],
    K: int,
    gradients: Mapping[int, ParamVector],
    stats: dict | None = None,
) -> list[int]:
    """Greedy gradient-representative selection.

    Minimizes ``G(S) = sum_i min_{j in S} ||g_i - g_j||`` by adding, ``K``
    times, the client with the largest reduction of ``G`` (ties to the lower
    id). Before anything is chosen each row's cost is its largest distance,
    so every greedy step reduces ``G`` by a non-negative amount. If ``stats``
    is given, ``stats["scans"]`` counts candidate evaluations
    (``|pool| * K``) and ``stats["reductions"]`` lists the per-step decrease.
    """
    ids = sorted(pool)
    missing = [k for k in ids if k not in gradients]
    if missing:
        raise SelectionError(f"no gradient for client(s) {missing}")
    if not 1 <= K <= len(ids):
        raise SelectionError("K must be between 1 and |pool|")
    G = np.vstack([np.asarray(gradients[k], dtype=np.float64) for k in ids])
    dist = np.linalg.norm(G[:, None, :] - G[None, :, :], axis=2)
    current = dist.max(axis=1)
    chosen: list[int] = []
    taken = np.zeros(len(ids), dtype=bool)
    scans = 0
    reductions = []
    for _ in range(K):
        best_j, best_red = -1, -math.inf
        for j in range(len(ids)):
            scans += 1
            if taken[j]:
                continue
            red = float(np.maximum(current - dist[:, j], 0.0).sum())
            if red > best_red:
                best_j, best_red = j, red
        taken[best_j] = True
        chosen.append(best_j)
        current = np.minimum(current, dist[:, best_j])
        reductions.append(best_red)
    if stats is not None:
        stats["scans"] = scans
        stats["reductions"] = reductions
    return sorted(ids[j] for j in chosen)
