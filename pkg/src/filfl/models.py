"""Loss functions, gradients and the client-side local solver.

Three model kinds share one flat parameter layout:

* ``linear-regression-l2``: ``w`` of length ``input_dim``, squared loss ``0.5 (w.x - y)^2``.
* ``logistic-regression-l2``: multinomial softmax, ``W`` of shape ``(classes, input_dim)``
  stored row-major, cross-entropy loss.
* ``mlp-1hidden``: one tanh hidden layer followed by a softmax output layer.

Every loss adds ``(l2 / 2) * ||params||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, NonFiniteError, ParamVector, RngStream, check_finite

LINEAR = "linear-regression-l2"
LOGISTIC = "logistic-regression-l2"
MLP = "mlp-1hidden"
MODEL_KINDS = (LINEAR, LOGISTIC, MLP)

LR_SCHEDULES = ("constant", "step-decay", "inverse-t")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    classes: int = 2
    hidden_units: int = 8
    l2: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.kind != LINEAR and self.classes < 2:
            raise ValueError("classification needs at least 2 classes")
        if self.kind == MLP and self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")

    @property
    def dim(self) -> int:
        d, c, h = self.input_dim, self.classes, self.hidden_units
        if self.kind == LINEAR:
            return d
        if self.kind == LOGISTIC:
            return c * d
        return h * d + h + c * h + c

    @property
    def is_classifier(self) -> bool:
        return self.kind != LINEAR

    @property
    def is_convex(self) -> bool:
        return self.kind != MLP

    def init_params(self, rng: RngStream | None = None, scale: float = 0.1) -> ParamVector:
        """Zeros for the convex kinds; small Gaussian weights for the MLP."""
        if self.kind != MLP:
            return np.zeros(self.dim)
        if rng is None:
            raise ValueError("the MLP needs an rng for symmetric-breaking init")
        return scale * rng.generator().standard_normal(self.dim)


@dataclass(frozen=True)
class LocalTrainConfig:
    """Client-side optimizer settings.

    ``lr_schedule`` picks how the per-round learning rate evolves:
    ``constant``, ``step-decay`` (multiply by ``lr_decay`` every
    ``decay_interval_rounds``) or ``inverse-t`` (``learning_rate / (t + lr_offset)``
    with ``t`` the 1-based round index, so ``learning_rate`` plays the role of beta).
    """

    epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 0.1
    lr_schedule: str = "constant"
    lr_decay: float = 1.0
    decay_interval_rounds: int = 1
    lr_offset: float = 0.0
    proximal_mu: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.decay_interval_rounds < 1:
            raise ValueError("decay_interval_rounds must be >= 1")
        if self.proximal_mu < 0:
            raise ValueError("proximal_mu must be non-negative")
        if self.lr_schedule == "inverse-t" and self.lr_offset < 0:
            raise ValueError("lr_offset must be non-negative")

    def lr_at(self, round_index: int) -> float:
        """Learning rate used in round ``round_index`` (0-based)."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        if self.lr_schedule == "step-decay":
            return self.learning_rate * self.lr_decay ** (round_index // self.decay_interval_rounds)
        return self.learning_rate / (round_index + 1 + self.lr_offset)


def _check(spec: ModelSpec, params: np.ndarray, data: Dataset) -> None:
    if params.shape != (spec.dim,):
        raise ValueError(f"params have shape {params.shape}, model expects ({spec.dim},)")
    if data.size == 0:
        raise ValueError("empty dataset")
    if data.feature_dim != spec.input_dim:
        raise ValueError(f"data has {data.feature_dim} features, model expects {spec.input_dim}")


def _unpack_mlp(spec: ModelSpec, params: np.ndarray):
    d, h, c = spec.input_dim, spec.hidden_units, spec.classes
    i = 0
    W1 = params[i : i + h * d].reshape(h, d)
    i += h * d
    b1 = params[i : i + h]
    i += h
    W2 = params[i : i + c * h].reshape(c, h)
    i += c * h
    b2 = params[i : i + c]
    return W1, b1, W2, b2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _labels(spec: ModelSpec, data: Dataset) -> np.ndarray:
    y = data.y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= spec.classes) or np.any(y != data.y):
        raise ValueError(f"labels must be class indices in [0, {spec.classes})")
    return y


def logits(spec: ModelSpec, params: ParamVector, X: np.ndarray) -> np.ndarray:
    """Raw model outputs: shape ``(m,)`` for regression, ``(m, classes)`` otherwise."""
    if spec.kind == LINEAR:
        return X @ params
    if spec.kind == LOGISTIC:
        return X @ params.reshape(spec.classes, spec.input_dim).T
    W1, b1, W2, b2 = _unpack_mlp(spec, params)
    return np.tanh(X @ W1.T + b1) @ W2.T + b2


def loss(spec: ModelSpec, params: ParamVector, data: Dataset) -> float:
    """Mean per-example loss on ``data`` plus the l2 penalty."""
    params = np.asarray(params, dtype=np.float64)
    _check(spec, params, data)
    out = logits(spec, params, data.X)
    if spec.kind == LINEAR:
        data_loss = 0.5 * np.mean((out - data.y) ** 2)
    else:
        y = _labels(spec, data)
        data_loss = -np.mean(_log_softmax(out)[np.arange(data.size), y])
    value = float(data_loss + 0.5 * spec.l2 * params @ params)
    if not np.isfinite(value):
        raise NonFiniteError("non-finite loss")
    return value


def gradient(spec: ModelSpec, params: ParamVector, batch: Dataset) -> ParamVector:
    """Gradient of :func:`loss` with respect to ``params``."""
    params = np.asarray(params, dtype=np.float64)
    _check(spec, params, batch)
    X, m = batch.X, batch.size
    if spec.kind == LINEAR:
        g = X.T @ (X @ params - batch.y) / m
    elif spec.kind == LOGISTIC:
        y = _labels(spec, batch)
        probs = np.exp(_log_softmax(X @ params.reshape(spec.classes, spec.input_dim).T))
        probs[np.arange(m), y] -= 1.0
        g = (probs.T @ X / m).reshape(-1)
    else:
        y = _labels(spec, batch)
        W1, b1, W2, b2 = _unpack_mlp(spec, params)
        hidden = np.tanh(X @ W1.T + b1)
        delta_out = np.exp(_log_softmax(hidden @ W2.T + b2))
        delta_out[np.arange(m), y] -= 1.0
        delta_out /= m
        delta_hidden = (delta_out @ W2) * (1.0 - hidden**2)
        g = np.concatenate(
            [
                (delta_hidden.T @ X).reshape(-1),
                delta_hidden.sum(axis=0),
                (delta_out.T @ hidden).reshape(-1),
                delta_out.sum(axis=0),
            ]
        )
    return check_finite(g + spec.l2 * params, "gradient")


def predict(spec: ModelSpec, params: ParamVector, X: np.ndarray) -> np.ndarray:
    out = logits(spec, np.asarray(params, dtype=np.float64), np.asarray(X, dtype=np.float64))
    if spec.kind == LINEAR:
        return out
    return np.argmax(out, axis=1)


def accuracy(spec: ModelSpec, params: ParamVector, data: Dataset) -> float:
    """Fraction of examples whose argmax prediction equals the label."""
    if not spec.is_classifier:
        raise ValueError("accuracy is only defined for classification models")
    params = np.asarray(params, dtype=np.float64)
    _check(spec, params, data)
    return float(np.mean(predict(spec, params, data.X) == _labels(spec, data)))


def local_sgd(
    spec: ModelSpec,
    params_in: ParamVector,
    data: Dataset,
    cfg: LocalTrainConfig,
    anchor: ParamVector | None,
    rng: RngStream,
    lr: float | None = None,
) -> ParamVector:
    """Run ``cfg.epochs`` epochs of shuffled mini-batch SGD from ``params_in``.

    The objective is the client loss plus ``(proximal_mu / 2) ||w - anchor||^2``
    when ``cfg.proximal_mu > 0`` (FedProx); ``anchor`` is otherwise ignored.
    ``lr`` overrides ``cfg.learning_rate`` so callers can apply a round schedule.
    """
    step = cfg.learning_rate if lr is None else lr
    w = np.array(params_in, dtype=np.float64)
    if cfg.proximal_mu > 0:
        if anchor is None:
            raise ValueError("FedProx needs the broadcast model as anchor")
        anchor = np.asarray(anchor, dtype=np.float64)
    gen = rng.generator()
    m = data.size
    if m == 0:
        raise ValueError("empty dataset")
    for _ in range(cfg.epochs):
        order = gen.permutation(m)
        for start in range(0, m, cfg.batch_size):
            batch = data.subset(order[start : start + cfg.batch_size])
            g = gradient(spec, w, batch)
            if cfg.proximal_mu > 0:
                g = g + cfg.proximal_mu * (w - anchor)
            w = w - step * g
    return check_finite(w)
