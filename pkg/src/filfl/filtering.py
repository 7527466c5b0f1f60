"""Client filtering: the public-data reward, greedy double filtering, and exhaustive search.

The reward of a client subset ``S`` is ``C - F_pub(mean_{k in S} w_k)``: the
higher it is, the better the plain average of those clients' models does on
the server's public data. Filtering looks for a high-reward subset with a
single double-greedy pass (deterministic "D" or randomized "R" acceptance)
using at most ``2n + 2`` loss evaluations for ``n`` available clients.

Oracles keep the constant ``C`` apart from the set-dependent part of the
reward, and marginal gains are computed from the set-dependent part only.
That makes filtering decisions bit-identical for any ``C``, not merely equal
up to rounding.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import models
from .core import Dataset, NonFiniteError, ParamVector, RngStream, simple_average
from .models import ModelSpec

MAX_BRUTE_FORCE = 20
FILTER_MODES = ("D", "R")
EMPTY_SET_CONVENTIONS = ("global", "zero")


class FilterError(RuntimeError):
    pass


class SetOracle:
    """Memoized set function ``reward(S) = C + base(S)`` with an evaluation counter.

    ``evals`` counts calls to the underlying ``_evaluate``; memo hits are free.
    The memo lives until :meth:`reset_memo`.
    """

    def __init__(self, C: float = 0.0):
        self.C = float(C)
        self.evals = 0
        self._memo: dict[frozenset, float] = {}

    def _evaluate(self, S: frozenset) -> float:
        raise NotImplementedError

    def reset_memo(self) -> None:
        self._memo.clear()

    def base(self, S: Iterable[int]) -> float:
        key = frozenset(S)
        try:
            return self._memo[key]
        except KeyError:
            pass
        try:
            value = float(self._evaluate(key))
        except NonFiniteError:
            value = math.nan
        self.evals += 1
        if not math.isfinite(value):
            raise FilterError(f"non-finite reward for subset {sorted(key)}")
        self._memo[key] = value
        return value

    def reward(self, S: Iterable[int]) -> float:
        return self.C + self.base(S)

    def gain(self, before: Iterable[int], after: Iterable[int]) -> float:
        """``reward(after) - reward(before)``, with ``C`` cancelled exactly."""
        return self.base(after) - self.base(before)


class FunctionOracle(SetOracle):
    """Wrap an arbitrary set function, e.g. a synthetic reward table."""

    def __init__(self, fn: Callable[[frozenset], float], C: float = 0.0):
        super().__init__(C)
        self.fn = fn

    def _evaluate(self, S: frozenset) -> float:
        return self.fn(S)


class RewardOracle(SetOracle):
    """The public-dataset reward of a client subset's averaged model.

    ``fallback_params`` (normally the current global model) stands in for the
    average of the empty set. With ``empty_set="zero"`` the zero vector is
    used instead.
    """

    def __init__(
        self,
        spec: ModelSpec,
        public: Dataset,
        C: float = 0.0,
        fallback_params: ParamVector | None = None,
        empty_set: str = "global",
    ):
        super().__init__(C)
        if empty_set not in EMPTY_SET_CONVENTIONS:
            raise ValueError(f"unknown empty-set convention {empty_set!r}")
        if public.size == 0:
            raise ValueError("public dataset is empty")
        self.spec = spec
        self.public = public
        self.empty_set = empty_set
        self.fallback_params = fallback_params
        self.weights: Mapping[int, ParamVector] = {}

    def bind(self, weights: Mapping[int, ParamVector], fallback_params: ParamVector | None = None) -> None:
        """Point the oracle at a new set of client models; drops the memo if they changed."""
        if weights is not self.weights:
            self.weights = weights
            self.reset_memo()
        if fallback_params is not None and fallback_params is not self.fallback_params:
            self.fallback_params = fallback_params
            self._memo.pop(frozenset(), None)

    def public_loss(self, params: ParamVector) -> float:
        return models.loss(self.spec, params, self.public)

    def _evaluate(self, S: frozenset) -> float:
        if not S:
            if self.empty_set == "zero":
                params = np.zeros(self.spec.dim)
            elif self.fallback_params is None:
                raise FilterError("reward of the empty set needs fallback params (the global model)")
            else:
                params = self.fallback_params
        else:
            missing = [k for k in S if k not in self.weights]
            if missing:
                raise FilterError(f"no model weights for client(s) {sorted(missing)}")
            params = simple_average([self.weights[k] for k in sorted(S)])
        return -self.public_loss(params)


def reward(oracle: SetOracle, S: Iterable[int], weights: Mapping[int, ParamVector] | None = None) -> float:
    """``C - F_pub(average of S's models)``; see :class:`RewardOracle`."""
    if weights is not None:
        oracle.bind(weights)
    return oracle.reward(S)


@dataclass(frozen=True)
class FilterStep:
    client_id: int
    a: float
    b: float
    p: float
    accepted: bool


@dataclass
class FilterTrace:
    mode: str
    steps: list[FilterStep] = field(default_factory=list)
    oracle_calls: int = 0

    @property
    def accepted(self) -> frozenset:
        return frozenset(s.client_id for s in self.steps if s.accepted)

    def replay(self) -> tuple[frozenset, frozenset]:
        """Rebuild ``(X_n, Y_n)`` from the recorded decisions alone."""
        X: set[int] = set()
        Y = {s.client_id for s in self.steps}
        for s in self.steps:
            if s.accepted:
                X.add(s.client_id)
            else:
                Y.discard(s.client_id)
        return frozenset(X), frozenset(Y)

    def records(self, round_index: int | None = None) -> list[dict]:
        return [
            {"round": round_index, "i": i, "client_id": s.client_id, "a": s.a, "b": s.b,
             "p": s.p, "accepted": s.accepted}
            for i, s in enumerate(self.steps, start=1)
        ]

    def to_jsonl(self, round_index: int | None = None) -> str:
        return "".join(json.dumps(r, sort_keys=False) + "\n" for r in self.records(round_index))


def acceptance_probability(a: float, b: float, mode: str) -> float:
    """Probability of keeping a client given its add gain ``a`` and removal gain ``b``."""
    if mode == "D":
        return 1.0 if a > b else 0.0
    if mode == "R":
        a_pos, b_pos = max(a, 0.0), max(b, 0.0)
        if a_pos == 0.0 and b_pos == 0.0:
            return 1.0
        return a_pos / (a_pos + b_pos)
    raise ValueError(f"unknown filter mode {mode!r}")


def chi_gf(
    oracle: SetOracle,
    pool: Sequence[int],
    weights: Mapping[int, ParamVector] | None,
    mode: str,
    rng: RngStream | None = None,
) -> tuple[frozenset, FilterTrace]:
    """Greedy double filtering over ``pool`` (visited in ascending id order).

    Starting from ``X = {}`` and ``Y = pool``, each client ``u`` is kept
    (added to ``X``) or dropped (removed from ``Y``) according to
    :func:`acceptance_probability` of ``a = R(X+u) - R(X)`` and
    ``b = R(Y-u) - R(Y)``. Mode "R" draws one uniform per step from ``rng``;
    mode "D" never touches it. Returns the final ``X`` (equal to ``Y``) and
    the step trace.
    """
    if mode not in FILTER_MODES:
        raise ValueError(f"unknown filter mode {mode!r}")
    order = sorted(pool)
    if not order:
        raise ValueError("pool is empty")
    if len(set(order)) != len(order):
        raise ValueError("pool contains duplicate client ids")
    if mode == "R" and rng is None:
        raise ValueError("mode R needs an rng")
    if weights is not None:
        oracle.bind(weights)
    oracle.reset_memo()
    gen = rng.generator() if mode == "R" else None
    start = oracle.evals

    X: frozenset = frozenset()
    Y: frozenset = frozenset(order)
    trace = FilterTrace(mode)
    for u in order:
        a = oracle.gain(X, X | {u})
        b = oracle.gain(Y, Y - {u})
        p = acceptance_probability(a, b, mode)
        keep = p == 1.0 if gen is None else gen.random() < p
        if keep:
            X = X | {u}
        else:
            Y = Y - {u}
        trace.steps.append(FilterStep(u, a, b, p, bool(keep)))
    assert X == Y
    trace.oracle_calls = oracle.evals - start
    return X, trace


def brute_force_opt(
    oracle: SetOracle, pool: Sequence[int], weights: Mapping[int, ParamVector] | None = None
) -> tuple[frozenset, float]:
    """Best non-empty subset of ``pool`` by exhaustive search over ``2^n - 1`` sets.

    Ties go to the smaller set, then to the lexicographically first sorted id tuple.
    """
    order = sorted(set(pool))
    if not order:
        raise ValueError("pool is empty")
    if len(order) > MAX_BRUTE_FORCE:
        raise ValueError(f"pool of {len(order)} exceeds the brute-force limit of {MAX_BRUTE_FORCE}")
    if weights is not None:
        oracle.bind(weights)
    best: frozenset | None = None
    best_value = -math.inf
    for r in range(1, len(order) + 1):
        for combo in itertools.combinations(order, r):
            value = oracle.base(combo)
            if value > best_value:
                best, best_value = frozenset(combo), value
    return best, oracle.C + best_value


def approximation_ratio(greedy_reward: float, opt_reward: float) -> float:
    """``greedy / opt``; only meaningful when the optimum reward is positive."""
    if not opt_reward > 0:
        raise ValueError(
            f"optimal reward {opt_reward!r} is not positive; raise the reward constant C"
        )
    return greedy_reward / opt_reward


def sample_disjoint_pair(pool: Sequence[int], gen: np.random.Generator) -> tuple[frozenset, frozenset]:
    """Two disjoint non-empty subsets with sizes uniform in ``[1, n // 2]``."""
    order = np.array(sorted(pool))
    half = len(order) // 2
    size_a = int(gen.integers(1, half + 1))
    size_b = int(gen.integers(1, half + 1))
    picked = gen.choice(order, size=size_a + size_b, replace=False)
    return frozenset(int(k) for k in picked[:size_a]), frozenset(int(k) for k in picked[size_a:])


def weak_submodularity_margins(oracle: SetOracle, A: frozenset, B: frozenset) -> tuple[float, float]:
    """Return ``(sum_e [f(A+e) - f(A)], f(A u B) - f(A))`` for ``e`` in ``B``."""
    singles = math.fsum(oracle.gain(A, A | {e}) for e in sorted(B))
    return singles, oracle.gain(A, A | B)


def weak_submodularity_holds(singles: float, joint: float, gamma: float) -> bool:
    threshold = min(gamma * joint, joint / gamma)
    # slack is independent of gamma, which keeps the verdict monotone in gamma
    slack = 1e-12 * (1.0 + abs(singles) + abs(joint))
    return singles >= threshold - slack


def weak_submodularity_check(
    oracle: SetOracle,
    pool: Sequence[int],
    weights: Mapping[int, ParamVector] | None,
    gammas: Sequence[float],
    samples: int,
    rng: RngStream,
) -> dict[float, float]:
    """Percentage of random disjoint ``(A, B)`` pairs satisfying the gamma-weak condition.

    All gammas are scored on the same sampled pairs.
    """
    if len(set(pool)) < 2:
        raise ValueError("need at least 2 clients")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if any(not 0 < g <= 1 for g in gammas):
        raise ValueError("gammas must lie in (0, 1]")
    if weights is not None:
        oracle.bind(weights)
    gen = rng.generator()
    margins = [weak_submodularity_margins(oracle, *sample_disjoint_pair(pool, gen)) for _ in range(samples)]
    return {
        g: 100.0 * sum(weak_submodularity_holds(s, j, g) for s, j in margins) / samples
        for g in gammas
    }
