"""A small differentiable binary matcher over similarity features.

One rectifier hidden layer feeding a logistic output, trained by
adaptive-moment gradient descent. Both loss functions used in the package
(label cross-entropy and the risk-weighted variant) are instances of one
weighted log loss, so the analytic backward pass is shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-7
PREACT_CLAMP = 30.0

_PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class MatcherModel:
    """Parameters of the two-layer matcher: input d -> hidden H -> 1."""

    w1: np.ndarray  # (H, d)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H,)
    b2: np.ndarray  # (1,)

    @property
    def input_size(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.w1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    def copy(self) -> "MatcherModel":
        return MatcherModel(**{k: v.copy() for k, v in self.params().items()})


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for both training phases.

    The risk phase steps with ``learning_rate * risk_lr_scale``.
    """

    learning_rate: float = 1e-3
    pretrain_epochs: int = 20
    risk_epochs: int = 10
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    risk_lr_scale: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment decays must lie in [0, 1)")
        if self.pretrain_epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.risk_epochs < 0:
            raise ValueError("risk_epochs must be >= 0")


@dataclass
class OptimizerState:
    """First/second moment accumulators and the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_model(cls, model: MatcherModel) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in model.params().items()},
            v={k: np.zeros_like(p) for k, p in model.params().items()},
        )


def init_model(input_size: int, hidden_size: int, seed: int) -> MatcherModel:
    """Random small-scale initialization, deterministic from seed."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(input_size)
    return MatcherModel(
        w1=rng.normal(0.0, scale, size=(hidden_size, input_size)),
        b1=np.zeros(hidden_size),
        w2=rng.normal(0.0, 1.0 / np.sqrt(hidden_size), size=hidden_size),
        b2=np.zeros(1),
    )


def _forward(model: MatcherModel, x: np.ndarray):
    pre = x @ model.w1.T + model.b1          # (n, H)
    hidden = np.maximum(pre, 0.0)
    z_raw = hidden @ model.w2 + model.b2[0]  # (n,)
    z = np.clip(z_raw, -PREACT_CLAMP, PREACT_CLAMP)
    g = 1.0 / (1.0 + np.exp(-z))
    return pre, hidden, z_raw, g


def predict_proba(model: MatcherModel, x: np.ndarray) -> np.ndarray:
    """Match probability for each row of x, strictly inside (0, 1)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.input_size:
        raise ValueError(f"expected {model.input_size} features, got {x.shape[1]}")
    return _forward(model, x)[3]


def weighted_log_loss(model: MatcherModel, x: np.ndarray, pos_weight: np.ndarray,
                      neg_weight: np.ndarray) -> float:
    """Mean of -a*log(g) - b*log(1-g) with probabilities clamped away from {0,1}."""
    if len(x) == 0:
        raise ValueError("empty batch")
    g = np.clip(predict_proba(model, x), PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(np.mean(-pos_weight * np.log(g) - neg_weight * np.log1p(-g)))


def cross_entropy_loss(model: MatcherModel, x: np.ndarray, y: np.ndarray) -> float:
    """Mean label cross-entropy of the batch (natural log)."""
    y = np.asarray(y, dtype=np.float64)
    return weighted_log_loss(model, x, y, 1.0 - y)


def backward(model: MatcherModel, x: np.ndarray, pos_weight: np.ndarray,
             neg_weight: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of the weighted log loss w.r.t. every parameter.

    Cross-entropy is the case (a, b) = (y, 1-y); the risk loss passes
    (1 - VaR+, 1 - VaR-). Gradients vanish where the probability clamp or
    the pre-activation clamp is active, matching the loss actually computed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(x) == 0:
        raise ValueError("empty batch")
    a = np.asarray(pos_weight, dtype=np.float64)
    b = np.asarray(neg_weight, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("loss weights must be finite")
    n = len(x)
    pre, hidden, z_raw, g = _forward(model, x)
    live = (
        (np.abs(z_raw) < PREACT_CLAMP)
        & (g > PROB_FLOOR)
        & (g < 1.0 - PROB_FLOOR)
    )
    dz = np.where(live, (-a * (1.0 - g) + b * g) / n, 0.0)  # (n,)
    dw2 = hidden.T @ dz
    db2 = np.array([dz.sum()])
    dhidden = np.outer(dz, model.w2)
    dhidden[pre <= 0.0] = 0.0
    dw1 = dhidden.T @ x
    db1 = dhidden.sum(axis=0)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def cross_entropy_backward(model: MatcherModel, x: np.ndarray, y: np.ndarray) -> dict[str, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    return backward(model, x, y, 1.0 - y)


def optimizer_step(model: MatcherModel, state: OptimizerState,
                   grads: dict[str, np.ndarray], learning_rate: float,
                   config: TrainConfig) -> None:
    """One in-place adaptive-moment update with bias correction."""
    state.t += 1
    b1c = 1.0 - config.beta1 ** state.t
    b2c = 1.0 - config.beta2 ** state.t
    for name, grad in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * grad
        v *= config.beta2
        v += (1.0 - config.beta2) * grad * grad
        step = learning_rate * (m / b1c) / (np.sqrt(v / b2c) + config.eps)
        param = getattr(model, name)
        param -= step


def predicted_labels(model: MatcherModel, x: np.ndarray) -> np.ndarray:
    return (predict_proba(model, x) >= 0.5).astype(np.int64)


def _f1(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_f1: float
    extra_f1: float | None = None  # filled by an optional per-epoch eval hook


def run_epoch(model: MatcherModel, state: OptimizerState, x: np.ndarray,
              pos_weight: np.ndarray, neg_weight: np.ndarray,
              learning_rate: float, config: TrainConfig,
              rng: np.random.Generator) -> float:
    """One shuffled mini-batch pass; returns the pre-update mean loss."""
    order = rng.permutation(len(x))
    loss = weighted_log_loss(model, x, pos_weight, neg_weight)
    for start in range(0, len(x), config.batch_size):
        idx = order[start : start + config.batch_size]
        grads = backward(model, x[idx], pos_weight[idx], neg_weight[idx])
        optimizer_step(model, state, grads, learning_rate, config)
    return loss


def pretrain(model: MatcherModel, x_train: np.ndarray, y_train: np.ndarray,
             x_val: np.ndarray, y_val: np.ndarray, config: TrainConfig,
             epoch_eval=None) -> tuple[MatcherModel, list[EpochStats]]:
    """Mini-batch cross-entropy training with best-on-validation selection.

    Runs the configured number of epochs and returns the checkpoint with
    the highest validation F1 (earliest epoch on ties) plus the per-epoch
    log. ``epoch_eval``, when given, is called with the current model after
    every epoch and its result lands in the log.
    """
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("pretrain requires non-empty train and validation parts")
    y_train = np.asarray(y_train, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    state = OptimizerState.for_model(model)
    best_model = model.copy()
    best_f1 = _f1(predicted_labels(model, x_val), y_val)
    log: list[EpochStats] = []
    for epoch in range(1, config.pretrain_epochs + 1):
        loss = run_epoch(model, state, x_train, y_train, 1.0 - y_train,
                         config.learning_rate, config, rng)
        val_f1 = _f1(predicted_labels(model, x_val), y_val)
        extra = epoch_eval(model) if epoch_eval is not None else None
        log.append(EpochStats(epoch, loss, val_f1, extra))
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_model = model.copy()
    return best_model, log


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: MatcherModel, path: str | Path) -> None:
    np.savez(path, version=np.array([CHECKPOINT_VERSION]), **model.params())


def load_checkpoint(path: str | Path) -> MatcherModel:
    with np.load(path) as data:
        version = int(data["version"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return MatcherModel(**{name: data[name].copy() for name in _PARAM_NAMES})
