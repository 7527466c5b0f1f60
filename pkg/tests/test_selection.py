from __future__ import annotations

import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from filfl.core import RngStream
from filfl.selection import (
    SelectionError,
    SelectionStrategy,
    facility_cost,
    poc_candidates,
    select_divfl,
    select_poc,
    select_rs,
)


def test_rs_single_client_pool_with_replacement():
    assert select_rs([7], {7: 1.0}, 3, "rs-weighted-replacement", RngStream(0)) == [7, 7, 7]


def test_rs_uniform_whole_pool():
    assert select_rs([4, 2, 9], None, 3, "rs-uniform-noreplace", RngStream(0)) == [2, 4, 9]
    assert len(set(select_rs(range(10), None, 4, "rs-uniform-noreplace", RngStream(1)))) == 4


def test_rs_weighted_frequencies():
    counts = Counter(select_rs([0, 1], {0: 0.8, 1: 0.2}, 10_000, "rs-weighted-replacement", RngStream(3)))
    assert abs(counts[0] / 10_000 - 0.8) <= 0.02


def test_rs_renormalizes_over_pool():
    picks = select_rs([1, 2], {0: 0.9, 1: 0.05, 2: 0.05}, 2000, "rs-weighted-replacement", RngStream(4))
    assert abs(Counter(picks)[1] / 2000 - 0.5) < 0.05


def test_rs_errors():
    with pytest.raises(SelectionError):
        select_rs([], None, 1, "rs-uniform-noreplace", RngStream(0))
    with pytest.raises(SelectionError):
        select_rs([1], None, 1, "rs-other", RngStream(0))


def test_poc_top_losses():
    losses = {1: 3.0, 2: 1.0, 3: 2.0}
    assert select_poc([1, 2, 3], 2, 3, losses, RngStream(0)) == [1, 3]


def test_poc_k_equals_d_keeps_candidates():
    losses = {k: float(k) for k in range(10)}
    rng = RngStream(5)
    out = select_poc(range(10), 4, 4, losses, rng)
    assert out == poc_candidates(range(10), 4, None, rng)


def test_poc_ties_go_to_lower_ids():
    assert select_poc([5, 1, 3, 8], 2, 4, {k: 1.0 for k in (1, 3, 5, 8)}, RngStream(0)) == [1, 3]


def test_poc_errors():
    with pytest.raises(SelectionError):
        select_poc([1, 2], 2, 1, {1: 0.0, 2: 0.0}, RngStream(0))
    with pytest.raises(SelectionError, match="no loss"):
        select_poc([1, 2], 1, 2, {1: 0.0}, RngStream(0))


def _grads(n, d, seed):
    gen = np.random.default_rng(seed)
    return {k: gen.standard_normal(d) for k in range(n)}


def _dist(grads):
    G = np.vstack([grads[k] for k in sorted(grads)])
    return np.linalg.norm(G[:, None, :] - G[None, :, :], axis=2)


def test_divfl_whole_pool_has_zero_cost():
    grads = _grads(5, 3, 0)
    chosen = select_divfl(range(5), 5, grads)
    assert chosen == list(range(5))
    assert facility_cost(_dist(grads), chosen) == 0.0


def test_divfl_identical_gradients_tie_to_lower_id():
    grads = {3: np.array([1.0, 0.0]), 6: np.array([1.0, 0.0]), 9: np.array([5.0, 5.0])}
    chosen = select_divfl([3, 6, 9], 1, grads)
    assert chosen == [3]
    D = _dist(grads)
    assert facility_cost(D, [0]) == facility_cost(D, [1])


def test_divfl_greedy_on_small_instance_matches_exhaustive_first_pick():
    grads = {0: np.array([0.0]), 1: np.array([0.1]), 2: np.array([5.0]), 3: np.array([5.2])}
    D = _dist(grads)
    chosen = select_divfl(range(4), 2, grads)
    best = min(itertools.combinations(range(4), 2), key=lambda c: facility_cost(D, c))
    assert facility_cost(D, chosen) == pytest.approx(facility_cost(D, best))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(0, 10_000), st.data())
def test_divfl_reductions_non_negative_and_scan_count(n, seed, data):
    K = data.draw(st.integers(1, n))
    stats = {}
    chosen = select_divfl(range(n), K, _grads(n, 3, seed), stats)
    assert len(set(chosen)) == K
    assert stats["scans"] == n * K
    assert all(r >= 0 for r in stats["reductions"])


def test_divfl_errors():
    with pytest.raises(SelectionError):
        select_divfl([0, 1], 3, _grads(2, 2, 0))
    with pytest.raises(SelectionError, match="no gradient"):
        select_divfl([0, 5], 1, _grads(2, 2, 0))


def test_strategy_validation():
    assert SelectionStrategy("poc", 2, poc_d=4).K == 2
    with pytest.raises(SelectionError):
        SelectionStrategy("poc", 3, poc_d=2)
    with pytest.raises(SelectionError):
        SelectionStrategy("greedy", 3)
