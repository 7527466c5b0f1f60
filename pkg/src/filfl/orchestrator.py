"""The federated training loop with client filtering, plus its diagnostics."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import models
from .config import ExperimentConfig
from .core import Dataset, ParamVector, RngStream, simple_average, weighted_average
from .data import (
    FederatedTask,
    dirichlet_partition,
    make_availability,
    make_classification_source,
    make_synthetic_convex_task,
    size_weights,
    split_public,
)
from .filtering import (
    FilterTrace,
    RewardOracle,
    approximation_ratio,
    brute_force_opt,
    chi_gf,
    weak_submodularity_check,
)
from .models import LINEAR, LocalTrainConfig, ModelSpec
from .selection import poc_candidates, select_divfl, select_rs, top_k_by_loss

log = logging.getLogger(__name__)


class RoundError(RuntimeError):
    def __init__(self, round_index: int, cause: BaseException):
        super().__init__(f"round {round_index}: {type(cause).__name__}: {cause}")
        self.round_index = round_index


@dataclass
class RoundRecord:
    """Everything measured in one round.

    Losses and accuracy are measured on the aggregated model at the end of
    the round. ``reward``, ``opt_ratio`` and ``trace`` are only set in rounds
    where filtering actually ran.
    """

    round: int
    n_t: int
    available: frozenset
    filtered: frozenset
    selected: list[int]
    filter_ran: bool
    train_loss: float
    public_loss: float
    test_loss: float
    test_acc: float | None = None
    reward: float | None = None
    delta_gap: float | None = None
    opt_ratio: float | None = None
    oracle_calls: int = 0
    wall_ms: float | None = None
    trace: FilterTrace | None = None
    submod: dict[float, float] | None = None
    params: ParamVector = field(default=None, repr=False)


def build_task(config: ExperimentConfig, rng: RngStream) -> FederatedTask:
    t = config.task
    if t.generator == "synthetic":
        task = make_synthetic_convex_task(
            t.num_clients, t.dim, t.per_client_size, t.heterogeneity,
            t.public_size or 1, t.test_size, rng.child("synthetic"),
            target=t.target, classes=t.classes, noise=t.noise, signal_scale=t.signal_scale,
        )
        if t.public_mode == "fresh":
            return task
        clients, public = task.clients, task.public
        if t.public_mode == "per-client-slice":
            public, clients = split_public(clients, "per-client-slice", fraction=t.public_fraction,
                                           rng=rng.child("public"))
        else:
            public = _external_public(config)
        return FederatedTask(clients, public, task.test, size_weights(clients), target=task.target,
                             classes=task.classes, optima=task.optima)

    # dirichlet: one pooled labeled source, partitioned by class proportions
    fresh_public = t.public_size if t.public_mode == "fresh" else 0
    source = make_classification_source(t.source_size + t.test_size + fresh_public, t.dim, t.classes,
                                        rng.child("source"), signal_scale=t.signal_scale)
    perm = rng.child("test-split").generator().permutation(source.size)
    test = source.subset(np.sort(perm[: t.test_size]))
    public = source.subset(np.sort(perm[t.test_size : t.test_size + fresh_public])) if fresh_public else None
    pool = source.subset(np.sort(perm[t.test_size + fresh_public :]))
    if t.public_mode == "held-out-global":
        public, pool = split_public(pool, "held-out-global", fraction=t.public_fraction,
                                    size=None if t.public_fraction is not None else t.public_size,
                                    rng=rng.child("public"))
    clients = dirichlet_partition(pool, t.num_clients, t.alpha, rng.child("partition"))
    if t.public_mode == "per-client-slice":
        public, clients = split_public(clients, "per-client-slice", fraction=t.public_fraction,
                                       rng=rng.child("public"))
    elif t.public_mode == "external":
        public = _external_public(config)
    return FederatedTask(clients, public, test, size_weights(clients), target="classification",
                         classes=t.classes)


def _external_public(config: ExperimentConfig) -> Dataset:
    t = config.task
    public, _ = split_public(t.public_path, "external", feature_count=t.dim,
                             label_kind="real" if t.target == "regression" else "class",
                             skip_header=t.public_skip_header)
    return public


def build_spec(config: ExperimentConfig) -> ModelSpec:
    return ModelSpec(config.model.kind, config.task.dim, classes=config.task.classes,
                     hidden_units=config.model.hidden_units, l2=config.model.l2)


def build_train_config(config: ExperimentConfig) -> LocalTrainConfig:
    tr = config.train
    return LocalTrainConfig(epochs=tr.epochs, batch_size=tr.batch_size, learning_rate=tr.learning_rate,
                            lr_schedule=tr.lr_schedule, lr_decay=tr.lr_decay,
                            decay_interval_rounds=tr.decay_interval_rounds, lr_offset=tr.lr_offset,
                            proximal_mu=tr.proximal_mu)


def global_loss(task: FederatedTask, spec: ModelSpec, params: ParamVector) -> float:
    """``F(w) = sum_k p_k F_k(w)`` over clients that hold data."""
    return math.fsum(task.weights[k] * models.loss(spec, params, task.clients[k]) for k in task.active_ids)


def delta_gap(
    task: FederatedTask,
    spec: ModelSpec,
    client_params: Mapping[int, ParamVector],
    filtered: frozenset,
    weights: Mapping[int, float] | None = None,
) -> float:
    """``F(sum_k p_k v_k) - F(mean_{k in filtered} v_k)``.

    ``client_params`` must hold a model for every client with positive weight.
    """
    if not filtered:
        raise ValueError("filtered set is empty")
    weights = task.weights if weights is None else weights
    ids = [k for k in sorted(weights) if weights[k] > 0]
    v_bar = weighted_average({k: client_params[k] for k in ids}, {k: weights[k] for k in ids})
    z_bar = simple_average([client_params[k] for k in sorted(filtered)])
    return global_loss(task, spec, v_bar) - global_loss(task, spec, z_bar)


def global_optimum(task: FederatedTask, spec: ModelSpec) -> ParamVector:
    """Minimizer of the weighted global objective.

    Least squares is solved in closed form from the normal equations; the
    strongly convex logistic model is minimized numerically with L-BFGS.
    """
    if not spec.is_convex:
        raise ValueError("the optimum is only defined for convex model kinds")
    if spec.kind == LINEAR:
        d = spec.dim
        A = spec.l2 * np.eye(d)
        b = np.zeros(d)
        for k in task.active_ids:
            ds, p = task.clients[k], task.weights[k]
            A += p * ds.X.T @ ds.X / ds.size
            b += p * ds.X.T @ ds.y / ds.size
        return np.linalg.solve(A, b)
    from scipy.optimize import minimize

    def objective(w):
        grad = np.zeros_like(w)
        for k in task.active_ids:
            grad += task.weights[k] * models.gradient(spec, w, task.clients[k])
        return global_loss(task, spec, w), grad

    res = minimize(objective, np.zeros(spec.dim), jac=True, method="L-BFGS-B",
                   options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10_000})
    return res.x


def distance_to_optimum(params: ParamVector, task: FederatedTask, spec: ModelSpec,
                        optimum: ParamVector | None = None) -> float:
    """Squared Euclidean distance from ``params`` to the global optimum."""
    w_star = global_optimum(task, spec) if optimum is None else optimum
    diff = np.asarray(params) - w_star
    return float(diff @ diff)


def default_reward_constant(oracle: RewardOracle, w0: ParamVector) -> float:
    """Public loss of the initial model, so rewards measure improvement over it."""
    return oracle.public_loss(w0)


class _Trainer:
    """Runs local SGD for a batch of clients, optionally on a thread pool."""

    def __init__(self, spec, task, train_cfg, root: RngStream, workers: int):
        self.spec, self.task, self.cfg, self.root = spec, task, train_cfg, root
        self.pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def train(self, t: int, clients, w: ParamVector, lr: float) -> dict[int, ParamVector]:
        ids = sorted(set(clients))

        def one(k):
            return models.local_sgd(self.spec, w, self.task.clients[k], self.cfg, w,
                                    self.root.child("local", t, k), lr=lr)

        results = list(self.pool.map(one, ids)) if self.pool else [one(k) for k in ids]
        return dict(zip(ids, results))

    def close(self):
        if self.pool:
            self.pool.shutdown()


def run_experiment(config: ExperimentConfig) -> list[RoundRecord]:
    """Train for ``config.train.rounds`` rounds and return one record per round.

    Round 0 uses the whole available set. From round 1 on, filtering re-runs
    when ``t % h == 0`` or the available set changed, and otherwise reuses the
    previous filtered set. Selection is skipped when the filtered set has at
    most ``K`` clients. The new global model is the plain mean of the returned
    client models (with multiplicity, if a client was drawn twice).
    """
    root = RngStream(config.seed)
    task = build_task(config, root.child("task"))
    spec = build_spec(config)
    train_cfg = build_train_config(config)
    fed, diag = config.federation, config.diagnostics
    T = config.train.rounds
    schedule = make_availability(task.num_clients, fed.available, fed.resample_period, T,
                                 root.child("availability"), eligible=task.active_ids)
    w = spec.init_params(root.child("init"))
    oracle = RewardOracle(spec, task.public, C=0.0, fallback_params=w, empty_set=fed.empty_set)
    report_C = diag.reward_C if diag.reward_C is not None else default_reward_constant(oracle, w)
    trainer = _Trainer(spec, task, train_cfg, root, fed.parallel_workers)

    latest: dict[int, ParamVector] = {}
    prev_available: frozenset | None = None
    filtered: frozenset = frozenset()
    submod_done = 0
    records: list[RoundRecord] = []
    try:
        for t in range(T):
            try:
                started = time.perf_counter()
                available = schedule.available(t)
                lr = train_cfg.lr_at(t)
                rec = RoundRecord(round=t, n_t=len(available), available=available, filtered=frozenset(),
                                  selected=[], filter_ran=False, train_loss=math.nan,
                                  public_loss=math.nan, test_loss=math.nan)
                if fed.filter_mode == "off" or t == 0:
                    filtered = available
                elif t % fed.h == 0 or available != prev_available:
                    client_models = _client_models(fed.client_models, available, latest, w, spec, task, lr)
                    oracle.bind(client_models, fallback_params=w)
                    filtered, trace = chi_gf(oracle, sorted(available), None, fed.filter_mode,
                                             root.child("filter", t))
                    rec.filter_ran, rec.trace, rec.oracle_calls = True, trace, trace.oracle_calls
                    if not filtered:
                        log.warning("round %d: filtering rejected every client; using all available", t)
                        filtered = available
                    rec.reward = report_C + oracle.base(filtered)
                    if diag.opt_ratio:
                        _, opt_base = brute_force_opt(oracle, sorted(available))
                        rec.opt_ratio = approximation_ratio(rec.reward, report_C + opt_base)
                    if diag.submod_check and submod_done < diag.submod_rounds:
                        oracle.C = report_C
                        rec.submod = weak_submodularity_check(oracle, sorted(available), None, diag.gammas,
                                                              diag.submod_samples, root.child("submod", t))
                        oracle.C = 0.0
                        submod_done += 1
                prev_available = available
                rec.filtered = filtered

                active = _select(config, task, spec, filtered, w, root.child("select", t))
                rec.selected = active

                to_train = task.active_ids if diag.delta_gap else active
                trained = trainer.train(t, to_train, w, lr)
                if diag.delta_gap:
                    rec.delta_gap = delta_gap(task, spec, trained, filtered)
                for k in set(active):
                    latest[k] = trained[k]
                w = simple_average([trained[k] for k in active])

                rec.params = w
                rec.train_loss = global_loss(task, spec, w)
                rec.public_loss = models.loss(spec, w, task.public)
                rec.test_loss = models.loss(spec, w, task.test)
                if spec.is_classifier:
                    rec.test_acc = models.accuracy(spec, w, task.test)
                if diag.wall_clock:
                    rec.wall_ms = 1000.0 * (time.perf_counter() - started)
                records.append(rec)
            except RoundError:
                raise
            except Exception as exc:
                raise RoundError(t, exc) from exc
    finally:
        trainer.close()
    return records


def _client_models(mode, available, latest, w, spec, task, lr) -> dict[int, ParamVector]:
    if mode == "latest":
        return {k: latest.get(k, w) for k in sorted(available)}
    # one full-batch gradient step from the current global model
    return {k: w - lr * models.gradient(spec, w, task.clients[k]) for k in sorted(available)}


def _select(config: ExperimentConfig, task: FederatedTask, spec: ModelSpec, pool: frozenset,
            w: ParamVector, rng: RngStream) -> list[int]:
    fed = config.federation
    if len(pool) <= fed.K:
        return sorted(pool)
    kind = fed.selection
    if kind.startswith("rs-"):
        return select_rs(sorted(pool), task.weights, fed.K, kind, rng)
    if kind == "poc":
        d = fed.poc_d if fed.poc_d is not None else min(2 * fed.K, len(pool))
        candidates = poc_candidates(sorted(pool), d, task.weights, rng)
        losses = {k: models.loss(spec, w, task.clients[k]) for k in candidates}
        return top_k_by_loss(candidates, fed.K, losses)
    grads = {k: models.gradient(spec, w, task.clients[k]) for k in sorted(pool)}
    return select_divfl(sorted(pool), fed.K, grads)
