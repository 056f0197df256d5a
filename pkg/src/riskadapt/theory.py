"""Desk-scale stress tests of the flip-chance guarantees.

The closed-form lower/upper bounds on a misprediction's blended
equivalence expectation are evaluated directly; the concentration step
behind them is checked by Monte Carlo against the analytic tail; the
identicalness-of-activation assumption is reported (never enforced) as a
per-feature divergence diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .riskmodel import RiskModel, ScoredWorkload, weighted_moments
from .tables import format_table

FALSE_NEGATIVE = "false_negative"
FALSE_POSITIVE = "false_positive"


@dataclass(frozen=True)
class BoundQuery:
    m: int          # rule-feature count
    n: int          # supporter count
    delta: float    # failure probability
    epsilon: float  # qualification margin
    direction: str = FALSE_NEGATIVE

    def __post_init__(self) -> None:
        if self.m < 0 or self.n < 1:
            raise ValueError("need m >= 0 and n >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0,1), got {self.delta}")
        if self.direction not in (FALSE_NEGATIVE, FALSE_POSITIVE):
            raise ValueError(f"unknown direction {self.direction!r}")


def theorem_bound(q: BoundQuery) -> float:
    """Guaranteed-with-probability-1-delta expectation bound.

    False-negative direction: a lower bound on the blended equivalence
    expectation; false-positive direction: the mirrored upper bound.
    The inner quantities are evaluated cancellation-free (expm1/log1p), so
    the formula stays accurate for supporter counts up to 1e9 and beyond.
    """
    # 1 - delta^(1/n), computed as -expm1(ln(delta)/n) to survive n >> 1
    complement = -math.expm1(math.log(q.delta) / q.n)
    root = math.sqrt(complement)
    if root >= 1.0:
        raise ValueError("degenerate query: inner log argument out of domain")
    radical = math.sqrt((q.m + 1) / 2.0 * -math.log1p(-root))
    if q.direction == FALSE_NEGATIVE:
        return 0.5 + q.epsilon / 2.0 - radical
    return 0.5 - q.epsilon / 2.0 + radical


# ---------------------------------------------------------------------------
# supporter counting and delta estimates
# ---------------------------------------------------------------------------

@dataclass
class DeltaEstimate:
    """Empirical ingredients of the flip-chance bound for one misprediction.

    ``delta_var`` is the binding (smallest) risk gap over qualifying
    supporters, or the best candidate gap when none qualify;
    ``delta_c_lemma`` is the classifier-evidence bound via the empirical
    means of the weighted, clamped confidence terms; ``delta_c_simple`` is
    the plain mean classifier-evidence weight over the supporter
    population.
    """

    delta_var: float
    delta_c_lemma: float
    delta_c_simple: float


def _status_masks(scored: ScoredWorkload, y_true: np.ndarray):
    y_true = np.asarray(y_true, dtype=np.int64)
    pred = scored.predicted
    return {
        "TP": (pred == 1) & (y_true == 1),
        "TN": (pred == 0) & (y_true == 0),
        "FP": (pred == 1) & (y_true == 0),
        "FN": (pred == 0) & (y_true == 1),
    }


def supporter_counts(scored: ScoredWorkload, y_true: np.ndarray) -> np.ndarray:
    """Qualifying supporters per instance (0 for correct predictions).

    A supporter of a false negative is a true positive ranked after it
    whose risk gap exceeds the mean classifier-evidence weight of the true
    positives; symmetrically with true negatives for a false positive.
    """
    masks = _status_masks(scored, y_true)
    counts = np.zeros(len(scored.ids), dtype=np.int64)
    for err, sup, err_risk, sup_risk in (
        ("FN", "TP", scored.var_minus, scored.var_plus),
        ("FP", "TN", scored.var_plus, scored.var_minus),
    ):
        err_idx = np.where(masks[err])[0]
        sup_idx = np.where(masks[sup])[0]
        if len(err_idx) == 0 or len(sup_idx) == 0:
            continue
        dc = float(scored.w_hat_norm[sup_idx].mean())
        sorted_sup = np.sort(sup_risk[sup_idx])
        counts[err_idx] = np.searchsorted(sorted_sup, err_risk[err_idx] - dc, side="left")
    return counts


def _clamp01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def estimate_deltas(model: RiskModel, scored: ScoredWorkload, y_true: np.ndarray,
                    pair_id: str) -> DeltaEstimate:
    """Empirical risk-gap and classifier-evidence estimates for one
    mispredicted pair; raises if the pair was predicted correctly."""
    y_true = np.asarray(y_true, dtype=np.int64)
    try:
        i = scored.ids.index(pair_id)
    except ValueError:
        raise ValueError(f"unknown pair id {pair_id!r}") from None
    if scored.predicted[i] == y_true[i]:
        raise ValueError(f"pair {pair_id!r} is not mispredicted")

    masks = _status_masks(scored, y_true)
    sigma_hat = np.sqrt(model.dnn.sigma2_of(scored.mu_hat))
    w = scored.w_hat_norm
    if scored.predicted[i] == 0:  # false negative vs true positives
        err_mask, sup_mask = masks["FN"], masks["TP"]
        gaps = scored.var_minus[i] - scored.var_plus[sup_mask]
        conf = _clamp01(scored.mu_hat - 2.0 * sigma_hat)
    else:  # false positive vs true negatives
        err_mask, sup_mask = masks["FP"], masks["TN"]
        gaps = scored.var_plus[i] - scored.var_minus[sup_mask]
        conf = _clamp01(scored.mu_hat + 2.0 * sigma_hat)

    if not sup_mask.any():
        return DeltaEstimate(0.0, 0.0, 0.0)
    dc_simple = float(w[sup_mask].mean())
    qualifying = gaps > dc_simple
    delta_var = float(gaps[qualifying].min()) if qualifying.any() else float(gaps.max())
    dc_lemma = max(
        float((w * conf)[sup_mask].mean() - (w * conf)[err_mask].mean()),
        float((w * scored.mu_hat)[sup_mask].mean() - (w * scored.mu_hat)[err_mask].mean()),
    )
    return DeltaEstimate(delta_var, dc_lemma, dc_simple)


# ---------------------------------------------------------------------------
# Monte-Carlo concentration check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConcentrationTrial:
    """Sampling setup for the bounded-differences tail check.

    ``mu_hat`` fixes the classifier output for every draw; None samples it
    uniformly per draw, exercising the classifier output as one more
    independent coordinate of the blended statistic.
    """

    activation_probs: tuple[float, ...]
    weights: tuple[float, ...]
    mu_f: tuple[float, ...]
    sigma2_f: tuple[float, ...]
    samples: int = 100_000
    seed: int = 0
    mu_hat: float | None = None
    u: float = 1.0
    dnn_sigma2: float = 0.04

    def __post_init__(self) -> None:
        m = len(self.activation_probs)
        if m < 1:
            raise ValueError("need at least one rule feature")
        if not (len(self.weights) == len(self.mu_f) == len(self.sigma2_f) == m):
            raise ValueError("feature arrays must share one length")
        if any(not 0.0 <= p <= 1.0 for p in self.activation_probs):
            raise ValueError("activation probabilities must be in [0,1]")
        if self.samples < 1000:
            raise ValueError("need at least 1000 samples")

    @property
    def m(self) -> int:
        return len(self.activation_probs)


def mcdiarmid_trial(trial: ConcentrationTrial, eps_grid: Sequence[float]
                    ) -> list[tuple[float, float, float]]:
    """Empirical upper tail of the blended mu - 2*sigma statistic next to
    the analytic exp(-2 eps^2 / (m+1)) bound, per grid epsilon."""
    rng = np.random.default_rng(trial.seed)
    probs = np.asarray(trial.activation_probs)
    z = (rng.random((trial.samples, trial.m)) < probs[None, :]).astype(np.float64)
    if trial.mu_hat is None:
        mu_hat = rng.uniform(size=trial.samples)
    else:
        mu_hat = np.full(trial.samples, float(trial.mu_hat))
    w_hat = trial.u * 2.0 * np.abs(mu_hat - 0.5) + 1e-3
    mu, sigma2, _ = weighted_moments(
        z, np.asarray(trial.weights), np.asarray(trial.mu_f), np.asarray(trial.sigma2_f),
        w_hat, mu_hat, np.full(trial.samples, trial.dnn_sigma2),
    )
    stat = mu - 2.0 * np.sqrt(sigma2)
    center = float(stat.mean())
    rows = []
    for eps in eps_grid:
        tail = float(np.mean(stat - center >= eps))
        bound = math.exp(-2.0 * eps * eps / (trial.m + 1))
        rows.append((float(eps), tail, bound))
    return rows


def mcdiarmid_table(trial: ConcentrationTrial, eps_grid: Sequence[float]) -> str:
    rows = mcdiarmid_trial(trial, eps_grid)
    meta = [f"samples: {trial.samples}", f"m: {trial.m}", f"seed: {trial.seed}"]
    return format_table(meta, ["epsilon", "empirical_tail", "bound"], rows)


# ---------------------------------------------------------------------------
# activation-distribution diagnostic
# ---------------------------------------------------------------------------

@dataclass
class Assumption1Report:
    feature_ids: list[str]
    frequencies: dict[str, np.ndarray]       # per group, (m,)
    divergences: dict[str, np.ndarray]       # per group pair label, (m,)
    summaries: dict[str, float]              # mean absolute divergence

    def to_table(self) -> str:
        meta = [f"{label} mean_abs_divergence: {value!r}"
                for label, value in self.summaries.items()]
        columns = (["feature"] + [f"freq_{g}" for g in self.frequencies]
                   + [f"absdiff_{label}" for label in self.divergences])
        rows = []
        for j, fid in enumerate(self.feature_ids):
            row = [fid] + [float(self.frequencies[g][j]) for g in self.frequencies]
            row += [float(self.divergences[label][j]) for label in self.divergences]
            rows.append(row)
        return format_table(meta, columns, rows)


def assumption1_diagnostic(groups: Mapping[str, np.ndarray],
                           feature_ids: Sequence[str]) -> Assumption1Report:
    """Per-feature activation frequencies of the TP/FN and TN/FP groups.

    Purely diagnostic: reports the absolute frequency differences and a
    mean-absolute-divergence summary per group pair, with no pass/fail.
    """
    required = ("TP", "FN", "TN", "FP")
    for name in required:
        if name not in groups or len(groups[name]) == 0:
            raise ValueError(f"group {name} is missing or empty")
    freqs = {name: np.asarray(groups[name], dtype=np.float64).mean(axis=0)
             for name in required}
    divergences = {
        "TP_vs_FN": np.abs(freqs["TP"] - freqs["FN"]),
        "TN_vs_FP": np.abs(freqs["TN"] - freqs["FP"]),
    }
    summaries = {label: float(d.mean()) for label, d in divergences.items()}
    return Assumption1Report(list(feature_ids), freqs, divergences, summaries)
