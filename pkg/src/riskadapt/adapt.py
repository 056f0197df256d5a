"""Two-phase adaptive training: pre-train, then fine-tune against risk.

Phase one is plain cross-entropy pre-training with best-on-validation
selection. Phase two alternates, per iteration: refit the risk model on
validation under the current classifier, freeze the resulting per-pair
risk values on the unlabeled target, and run one optimization epoch of the
risk-weighted loss over the target. The label trajectory of every target
pair is tracked in a ledger that never feeds back into training.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .classifier import (
    MatcherModel,
    OptimizerState,
    TrainConfig,
    init_model,
    predict_proba,
    predicted_labels,
    pretrain,
    run_epoch,
    weighted_log_loss,
)
from .corpus import SplitFeatures
from .errors import EmptyPartitionError
from .riskfeat import RiskFeature, RuleParams, activation_matrix, induce_rules
from .riskmodel import (
    DEFAULT_BINS,
    RankFitConfig,
    RiskModel,
    ScoredWorkload,
    dnn_feature_fit,
    fit_ranking,
    score_workload,
)
from .tables import format_table
from .theory import supporter_counts

DEFAULT_HIDDEN = 32
SUPPORTER_BUCKET_EDGE = 100


@dataclass
class RiskWeights:
    """Frozen per-pair loss weights of one risk iteration."""

    one_minus_var_plus: np.ndarray
    one_minus_var_minus: np.ndarray
    iteration: int


def risk_loss(model: MatcherModel, x_test: np.ndarray, weights: RiskWeights) -> float:
    """Mean risk-weighted log loss over the target workload."""
    if len(x_test) != len(weights.one_minus_var_plus):
        raise ValueError("weights must cover every test pair")
    return weighted_log_loss(model, x_test, weights.one_minus_var_plus,
                             weights.one_minus_var_minus)


@dataclass
class LedgerSnapshot:
    iteration: int
    predicted: np.ndarray
    scored: ScoredWorkload | None = None  # risk state consumed by the next iteration


@dataclass
class FlipLedger:
    """Per-iteration predicted labels on the target, plus ground truth.

    Evaluation-only: the optimizer never reads it.
    """

    ids: list[str]
    truth: np.ndarray | None
    snapshots: list[LedgerSnapshot]


@dataclass
class MetricsEntry:
    phase: str  # "pretrain" | "risk"
    index: int
    loss: float
    val_f1: float
    test_f1: float | None


@dataclass
class AdaptResult:
    model: MatcherModel            # last risk-phase iterate
    pretrained: MatcherModel       # best-on-validation phase-one model
    risk_model: RiskModel
    rules: list[RiskFeature]
    ledger: FlipLedger
    metrics: list[MetricsEntry]


def _f1_of(pred: np.ndarray, truth: np.ndarray | None) -> float | None:
    if truth is None:
        return None
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def risk_iteration(model: MatcherModel, opt_state: OptimizerState, risk_model: RiskModel,
                   data: SplitFeatures, z_val: np.ndarray, z_test: np.ndarray,
                   config: TrainConfig, fit_config: RankFitConfig,
                   epoch_rng: np.random.Generator,
                   risk_val_indices: np.ndarray | None = None,
                   ) -> tuple[RiskModel, ScoredWorkload, RiskWeights, float]:
    """One fine-tuning iteration; mutates the classifier in place.

    Recomputes classifier outputs, refits the risk model on validation
    (keeping the previous model when validation cannot be partitioned),
    freezes the target risk values, and runs one risk-loss epoch. Risk
    values stay constant through the epoch.
    """
    mu_hat_val = predict_proba(model, data.x_val)
    mu_hat_test = predict_proba(model, data.x_test)

    take = risk_val_indices if risk_val_indices is not None else np.arange(len(data.x_val))
    try:
        dnn = dnn_feature_fit(mu_hat_val[take], data.y_val[take],
                              bins=risk_model.dnn.bins, u_raw=risk_model.dnn.u_raw)
        candidate = RiskModel(risk_model.features, risk_model.weight_raw.copy(),
                              risk_model.log_sigma2.copy(), dnn, risk_model.theta)
        scored_val = score_workload(candidate, [data.val_ids[i] for i in take],
                                    z_val[take], mu_hat_val[take])
        fitted = fit_ranking(candidate, scored_val, data.y_val[take], fit_config)
    except (EmptyPartitionError, ValueError):
        fitted = risk_model  # keep the previous model

    scored_test = score_workload(fitted, data.test_ids, z_test, mu_hat_test)
    weights = RiskWeights(1.0 - scored_test.var_plus, 1.0 - scored_test.var_minus, 0)
    loss = run_epoch(model, opt_state, data.x_test,
                     weights.one_minus_var_plus, weights.one_minus_var_minus,
                     config.learning_rate * config.risk_lr_scale, config, epoch_rng)
    return fitted, scored_test, weights, loss


def risk_phase(model: MatcherModel, data: SplitFeatures, config: TrainConfig,
               rule_params: RuleParams | None = None,
               fit_config: RankFitConfig | None = None,
               bins: int = DEFAULT_BINS,
               theta: float = 0.975,
               risk_val_indices: np.ndarray | None = None,
               ) -> tuple[MatcherModel, RiskModel, list[RiskFeature], FlipLedger, list[MetricsEntry]]:
    """Fine-tune a pre-trained classifier against the risk model.

    Induces rules from the labeled training part, then runs the configured
    number of risk iterations starting from ``model`` (which is not
    mutated). Returns the last iterate.
    """
    rule_params = rule_params or RuleParams(seed=config.seed)
    fit_config = fit_config or RankFitConfig(seed=config.seed)
    model = model.copy()

    rules = induce_rules(data.x_train, data.y_train, rule_params)
    z_val = activation_matrix(rules, data.x_val)
    z_test = activation_matrix(rules, data.x_test)

    take = risk_val_indices if risk_val_indices is not None else np.arange(len(data.x_val))
    dnn0 = dnn_feature_fit(predict_proba(model, data.x_val[take]), data.y_val[take], bins=bins)
    risk_model = RiskModel.initial(rules, dnn0, theta)

    ledger = FlipLedger(
        ids=list(data.test_ids),
        truth=data.y_test,
        snapshots=[LedgerSnapshot(0, predicted_labels(model, data.x_test))],
    )
    metrics: list[MetricsEntry] = []
    opt_state = OptimizerState.for_model(model)
    epoch_rng = np.random.default_rng(config.seed + 0x5EED)
    for k in range(1, config.risk_epochs + 1):
        iter_fit = replace(fit_config, seed=fit_config.seed + k)
        risk_model, scored_test, weights, loss = risk_iteration(
            model, opt_state, risk_model, data, z_val, z_test, config, iter_fit,
            epoch_rng, risk_val_indices=risk_val_indices,
        )
        ledger.snapshots[k - 1].scored = scored_test
        pred = predicted_labels(model, data.x_test)
        ledger.snapshots.append(LedgerSnapshot(k, pred))
        metrics.append(MetricsEntry(
            "risk", k, loss,
            _f1_of(predicted_labels(model, data.x_val), data.y_val),
            _f1_of(pred, data.y_test),
        ))
    return model, risk_model, rules, ledger, metrics


def adaptive_train(data: SplitFeatures, config: TrainConfig,
                   rule_params: RuleParams | None = None,
                   fit_config: RankFitConfig | None = None,
                   hidden_size: int = DEFAULT_HIDDEN,
                   bins: int = DEFAULT_BINS,
                   theta: float = 0.975,
                   risk_val_indices: np.ndarray | None = None) -> AdaptResult:
    """Run both phases end to end and return the last risk-phase model.

    Phase one selects the best checkpoint on validation; phase two runs the
    configured number of risk iterations and deliberately keeps the final
    iterate. With zero risk iterations the result equals the pre-trained
    model.
    """
    model = init_model(data.x_train.shape[1], hidden_size, config.seed)
    test_eval = (lambda m: _f1_of(predicted_labels(m, data.x_test), data.y_test))
    best, pretrain_log = pretrain(model, data.x_train, data.y_train,
                                  data.x_val, data.y_val, config, epoch_eval=test_eval)
    metrics = [MetricsEntry("pretrain", e.epoch, e.train_loss, e.val_f1, e.extra_f1)
               for e in pretrain_log]
    final, risk_model, rules, ledger, risk_metrics = risk_phase(
        best, data, config, rule_params, fit_config, bins=bins, theta=theta,
        risk_val_indices=risk_val_indices,
    )
    return AdaptResult(final, best, risk_model, rules, ledger, metrics + risk_metrics)


# ---------------------------------------------------------------------------
# flip reporting
# ---------------------------------------------------------------------------

@dataclass
class FlipReport:
    """Counts of label flips between two consecutive snapshots.

    ``stable`` covers the correctly predicted statuses; ``corrected``
    groups the mispredictions by how many qualifying supporters back
    their correction.
    """

    iteration: int
    stable: list[tuple[str, int, int]]                 # status, count, flipped
    corrected: list[tuple[str, str, int, int]]         # status, bucket, count, flipped

    def to_table(self) -> str:
        meta = [f"flip report for risk iteration {self.iteration} -> {self.iteration + 1}",
                "panel A: correctly predicted instances"]
        rows_a = [(status, count, flipped) for status, count, flipped in self.stable]
        panel_a = format_table(meta, ["status", "count", "flipped"], rows_a)
        panel_b = format_table(
            ["panel B: mispredictions grouped by qualifying supporter count"],
            ["status", "supporters", "count", "flipped"],
            self.corrected,
        )
        return panel_a + panel_b


def flip_report(ledger: FlipLedger, iteration: int) -> FlipReport:
    """Tabulate flips between snapshots ``iteration`` and ``iteration + 1``."""
    if ledger.truth is None:
        raise ValueError("flip reporting needs ground-truth labels in the ledger")
    if iteration < 0 or iteration + 1 >= len(ledger.snapshots):
        raise ValueError(f"iteration {iteration} out of range for "
                         f"{len(ledger.snapshots)} snapshots")
    before = ledger.snapshots[iteration]
    after = ledger.snapshots[iteration + 1]
    if before.scored is None:
        raise ValueError(f"snapshot {iteration} carries no risk state")
    truth = ledger.truth
    pred = before.predicted
    flipped = before.predicted != after.predicted

    stable = []
    for status, mask in (("TP", (pred == 1) & (truth == 1)),
                         ("TN", (pred == 0) & (truth == 0))):
        stable.append((status, int(mask.sum()), int(flipped[mask].sum())))

    counts = supporter_counts(before.scored, truth)
    corrected = []
    for status, mask in (("FN", (pred == 0) & (truth == 1)),
                         ("FP", (pred == 1) & (truth == 0))):
        few = mask & (counts < SUPPORTER_BUCKET_EDGE)
        many = mask & (counts >= SUPPORTER_BUCKET_EDGE)
        corrected.append((status, f"<{SUPPORTER_BUCKET_EDGE}",
                          int(few.sum()), int(flipped[few].sum())))
        corrected.append((status, f">={SUPPORTER_BUCKET_EDGE}",
                          int(many.sum()), int(flipped[many].sum())))
        corrected.append((status, "total", int(mask.sum()), int(flipped[mask].sum())))
    return FlipReport(iteration, stable, corrected)


def metrics_table(metrics: Sequence[MetricsEntry], meta: Sequence[str]) -> str:
    rows = [(e.phase, e.index, e.loss, e.val_f1,
             "" if e.test_f1 is None else repr(e.test_f1)) for e in metrics]
    return format_table(meta, ["phase", "index", "loss", "val_f1", "test_f1"], rows)
