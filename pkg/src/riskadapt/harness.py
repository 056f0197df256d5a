"""Desk-scale experiment protocols with multi-seed aggregation.

Three scenarios: a same-source sufficiency sweep (how much labeled
training data the risk phase can substitute for), distribution
misalignment (train on one synthetic source pair, validate and test on a
differently corrupted one), and validation-size robustness (how small the
labeled validation set can get before risk fitting stops paying off).
Every condition runs per seed; summaries report mean and population
standard deviation of test F1, and each emitted table echoes the plan for
provenance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, replace
from typing import Sequence

import numpy as np

from .adapt import AdaptResult, adaptive_train, _f1_of
from .classifier import TrainConfig, predicted_labels
from .corpus import (
    SplitFeatures,
    SyntheticSpec,
    SYNTHETIC_SCHEMA,
    build_features,
    generate_workload,
    labeled_candidates,
    split_dataset,
    stratified_parts,
)
from .errors import ConfigError
from .riskfeat import RuleParams
from .riskmodel import RankFitConfig
from .tables import format_table

SAME_SOURCE = "same_source"
MISALIGNED = "misaligned"
ROBUSTNESS = "robustness"

# fixed per-scenario seed offsets so that workload identity depends only on
# (plan, session seed)
_SAME_SOURCE_SEEDS = (3000, 3500)
_TRAIN_SOURCE_SEEDS = (9000, 9500)
_TARGET_SOURCE_SEEDS = (7000, 7500)


def f1(predictions: Sequence[int], truth: Sequence[int]) -> tuple[float, float, float]:
    """(precision, recall, f1) with zero-denominator cases mapped to 0."""
    if len(predictions) != len(truth):
        raise ValueError(f"length mismatch: {len(predictions)} vs {len(truth)}")
    if len(predictions) == 0:
        raise ValueError("empty inputs")
    pred = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(truth, dtype=np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    score = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, score


@dataclass(frozen=True)
class ExperimentPlan:
    """One scenario's full parameterization, seeds included."""

    scenario: str
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    sufficiency_levels: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 1.0)
    validation_sizes: tuple[int, ...] = (100, 200, 400)
    # same-source workload
    n_entities: int = 400
    corruption: float = 0.3
    # misaligned workloads
    train_entities: int = 300
    train_corruption: float = 0.05
    target_entities: int = 500
    target_corruption: float = 0.5
    # protocol knobs
    min_shared_tokens: int = 2
    split_ratios: tuple[float, float, float] = (0.2, 0.2, 0.6)
    val_rate: float = 0.2
    test_rate: float = 0.6
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        pretrain_epochs=20, risk_epochs=10, batch_size=8, risk_lr_scale=6.0))
    rules: RuleParams = field(default_factory=lambda: RuleParams(
        trees=40, depth=3, feature_subsample=0.25, threshold_grid=0.1))
    ranking: RankFitConfig = field(default_factory=lambda: RankFitConfig(
        margin=0.7, pair_samples=96, steps=2000, learning_rate=0.4))

    def __post_init__(self) -> None:
        if self.scenario not in (SAME_SOURCE, MISALIGNED, ROBUSTNESS):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if any(not 0.0 < f <= 1.0 for f in self.sufficiency_levels):
            raise ConfigError("sufficiency levels must lie in (0, 1]")

    def meta_lines(self) -> list[str]:
        skip = {"train", "rules", "ranking"}
        lines = [f"{key}: {value}" for key, value in asdict(self).items() if key not in skip]
        lines.append(f"train: {self.train}")
        lines.append(f"rules: {self.rules}")
        lines.append(f"ranking: {self.ranking}")
        return lines


@dataclass
class MetricsSummary:
    condition: str
    method: str  # "tradition" | "risk"
    mean_f1: float
    std_f1: float
    per_seed: tuple[float, ...]


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    summaries: list[MetricsSummary]
    table: str


def _summarize(condition: str, method: str, scores: Sequence[float]) -> MetricsSummary:
    arr = np.asarray(scores, dtype=np.float64)
    return MetricsSummary(condition, method, float(arr.mean()), float(arr.std()),
                          tuple(float(v) for v in arr))


# ---------------------------------------------------------------------------
# per-seed sessions
# ---------------------------------------------------------------------------

def same_source_features(plan: ExperimentPlan, seed: int,
                         train_fraction: float = 1.0) -> SplitFeatures:
    workload = generate_workload((
        SyntheticSpec(plan.n_entities, 2, plan.corruption, seed=_SAME_SOURCE_SEEDS[0] + seed),
        SyntheticSpec(plan.n_entities, 2, plan.corruption, seed=_SAME_SOURCE_SEEDS[1] + seed),
    ))
    pairs = labeled_candidates(workload, plan.min_shared_tokens)
    split = split_dataset(pairs, plan.split_ratios, seed=seed)
    train = split.train
    if train_fraction < 1.0:
        train = stratified_parts(split.train, (train_fraction,), seed=seed + 77)[0]
    return build_features(train, split.validation, split.test, SYNTHETIC_SCHEMA)


def misaligned_features(plan: ExperimentPlan, seed: int) -> SplitFeatures:
    source = generate_workload((
        SyntheticSpec(plan.train_entities, 2, plan.train_corruption,
                      seed=_TRAIN_SOURCE_SEEDS[0] + seed),
        SyntheticSpec(plan.train_entities, 2, plan.train_corruption,
                      seed=_TRAIN_SOURCE_SEEDS[1] + seed),
    ))
    target = generate_workload((
        SyntheticSpec(plan.target_entities, 2, plan.target_corruption,
                      seed=_TARGET_SOURCE_SEEDS[0] + seed),
        SyntheticSpec(plan.target_entities, 2, plan.target_corruption,
                      seed=_TARGET_SOURCE_SEEDS[1] + seed),
    ))
    train_pairs = labeled_candidates(source, plan.min_shared_tokens)
    target_pairs = labeled_candidates(target, plan.min_shared_tokens)
    val, test = stratified_parts(target_pairs, (plan.val_rate, plan.test_rate), seed=seed)
    return build_features(train_pairs, val, test, SYNTHETIC_SCHEMA)


def run_session(data: SplitFeatures, plan: ExperimentPlan, seed: int,
                risk_val_indices: np.ndarray | None = None
                ) -> tuple[float, float, AdaptResult]:
    """Train both methods once; Tradition is the risk run's own phase one."""
    config = replace(plan.train, seed=seed)
    result = adaptive_train(
        data, config,
        replace(plan.rules, seed=seed),
        replace(plan.ranking, seed=seed),
        risk_val_indices=risk_val_indices,
    )
    f1_tradition = _f1_of(predicted_labels(result.pretrained, data.x_test), data.y_test)
    f1_risk = _f1_of(predicted_labels(result.model, data.x_test), data.y_test)
    return f1_tradition, f1_risk, result


def subsample_validation(data: SplitFeatures, size: int, seed: int) -> np.ndarray:
    """Stratified validation indices of the requested size for risk fitting."""
    if size > len(data.y_val):
        raise ValueError(f"validation size {size} exceeds available {len(data.y_val)}")
    rng = np.random.default_rng(seed + 123)
    pos = np.where(data.y_val == 1)[0]
    neg = np.where(data.y_val == 0)[0]
    n_pos = min(len(pos), max(1, round(size * len(pos) / len(data.y_val))))
    chosen = np.concatenate([
        rng.choice(pos, n_pos, replace=False),
        rng.choice(neg, size - n_pos, replace=False),
    ])
    return np.sort(chosen)


# ---------------------------------------------------------------------------
# scenario runners
# ---------------------------------------------------------------------------

def run_sufficiency_sweep(plan: ExperimentPlan) -> ExperimentResult:
    """Tradition vs risk-adaptive F1 at each training-data fraction."""
    if plan.scenario != SAME_SOURCE:
        raise ConfigError("sufficiency sweep requires the same_source scenario")
    summaries: list[MetricsSummary] = []
    for fraction in plan.sufficiency_levels:
        tradition, risk = [], []
        for seed in plan.seeds:
            data = same_source_features(plan, seed, train_fraction=fraction)
            f1_t, f1_r, _ = run_session(data, plan, seed)
            tradition.append(f1_t)
            risk.append(f1_r)
        condition = f"fraction={fraction}"
        summaries.append(_summarize(condition, "tradition", tradition))
        summaries.append(_summarize(condition, "risk", risk))
    rows = [(s.condition, s.method, "aggregate", s.mean_f1, s.std_f1) for s in summaries]
    table = format_table(plan.meta_lines(), ["condition", "method", "seed", "f1", "std"], rows)
    return ExperimentResult(plan, summaries, table)


def run_misaligned(plan: ExperimentPlan) -> tuple[ExperimentResult, list[AdaptResult]]:
    """Tradition vs risk-adaptive F1 under a train/target corruption gap."""
    if plan.scenario not in (MISALIGNED, ROBUSTNESS):
        raise ConfigError("run_misaligned requires a misaligned-style scenario")
    tradition, risk, sessions = [], [], []
    for seed in plan.seeds:
        data = misaligned_features(plan, seed)
        f1_t, f1_r, result = run_session(data, plan, seed)
        tradition.append(f1_t)
        risk.append(f1_r)
        sessions.append(result)
    summaries = [_summarize("misaligned", "tradition", tradition),
                 _summarize("misaligned", "risk", risk)]
    rows = [("misaligned", method, str(seed), score, "")
            for method, scores in (("tradition", tradition), ("risk", risk))
            for seed, score in zip(plan.seeds, scores)]
    rows += [(s.condition, s.method, "aggregate", s.mean_f1, s.std_f1) for s in summaries]
    table = format_table(plan.meta_lines(), ["condition", "method", "seed", "f1", "std"], rows)
    return ExperimentResult(plan, summaries, table), sessions


def run_robustness(plan: ExperimentPlan) -> ExperimentResult:
    """Risk F1 as the validation set shrinks, with full-validation references.

    Train and test stay fixed per seed; only the validation subset feeding
    the risk-model fit changes. Reference rows carry the full-validation
    Tradition and Risk results.
    """
    if plan.scenario != ROBUSTNESS:
        raise ConfigError("run_robustness requires the robustness scenario")
    per_size: dict[int, list[float]] = {size: [] for size in plan.validation_sizes}
    tradition, risk_full = [], []
    rows = []
    for seed in plan.seeds:
        data = misaligned_features(plan, seed)
        f1_t, f1_r, _ = run_session(data, plan, seed)
        tradition.append(f1_t)
        risk_full.append(f1_r)
        for size in plan.validation_sizes:
            take = subsample_validation(data, size, seed)
            _, f1_sub, _ = run_session(data, plan, seed, risk_val_indices=take)
            per_size[size].append(f1_sub)
            rows.append((f"val_size={size}", "risk", str(seed), f1_sub, ""))
    summaries = [_summarize(f"val_size={size}", "risk", scores)
                 for size, scores in per_size.items()]
    summaries.append(_summarize("val_size=full", "tradition", tradition))
    summaries.append(_summarize("val_size=full", "risk", risk_full))
    rows += [(s.condition, s.method, "aggregate", s.mean_f1, s.std_f1) for s in summaries]
    table = format_table(plan.meta_lines(), ["condition", "method", "seed", "f1", "std"], rows)
    return ExperimentResult(plan, summaries, table)


def run_experiment(plan: ExperimentPlan) -> ExperimentResult:
    if plan.scenario == SAME_SOURCE:
        return run_sufficiency_sweep(plan)
    if plan.scenario == MISALIGNED:
        return run_misaligned(plan)[0]
    return run_robustness(plan)


def load_plan(path) -> ExperimentPlan:
    """Read an experiment plan from YAML."""
    import yaml
    from pathlib import Path

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"plan file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict) or "scenario" not in raw:
        raise ConfigError("plan must be a mapping with a scenario key")
    kwargs = dict(raw)
    for key in ("seeds", "sufficiency_levels", "validation_sizes", "split_ratios"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        if "train" in kwargs:
            kwargs["train"] = TrainConfig(**kwargs["train"])
        if "rules" in kwargs:
            kwargs["rules"] = RuleParams(**kwargs["rules"])
        if "ranking" in kwargs:
            kwargs["ranking"] = RankFitConfig(**kwargs["ranking"])
        return ExperimentPlan(**kwargs)
    except (TypeError, ValueError) as bad:
        raise ConfigError(f"invalid plan: {bad}") from bad


def standard_same_source_plan(**overrides) -> ExperimentPlan:
    return ExperimentPlan(scenario=SAME_SOURCE, **overrides)


def standard_misaligned_plan(**overrides) -> ExperimentPlan:
    return ExperimentPlan(scenario=MISALIGNED, **overrides)


def standard_robustness_plan(**overrides) -> ExperimentPlan:
    overrides.setdefault("validation_sizes", (100,))
    return ExperimentPlan(scenario=ROBUSTNESS, **overrides)
