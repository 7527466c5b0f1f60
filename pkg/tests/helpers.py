"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np

from filfl.core import Dataset
from filfl.models import LINEAR, ModelSpec, gradient, loss

FD_STEP = 1e-6


def fd_gradient(spec: ModelSpec, w: np.ndarray, data: Dataset, h: float = FD_STEP) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    out = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        out[i] = (loss(spec, w + e, data) - loss(spec, w - e, data)) / (2 * h)
    return out


def fd_relative_error(g: np.ndarray, fd: np.ndarray) -> float:
    # norm-wise, so near-zero coordinates do not blow the ratio up
    scale = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-8)
    return float(np.linalg.norm(g - fd) / scale)


def fd_max_rel_error(kind: str, probes: int, seed: int) -> float:
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        d = int(gen.integers(1, 6))
        classes = int(gen.integers(2, 5))
        spec = ModelSpec(kind, d, classes=classes, hidden_units=int(gen.integers(1, 6)),
                         l2=float(gen.uniform(0, 0.5)))
        m = int(gen.integers(1, 20))
        X = gen.standard_normal((m, d))
        y = gen.standard_normal(m) if kind == LINEAR else gen.integers(0, classes, m)
        data = Dataset(X, y)
        w = gen.standard_normal(spec.dim)
        worst = max(worst, fd_relative_error(gradient(spec, w, data), fd_gradient(spec, w, data)))
    return worst
