"""Per-pair equivalence distributions, value-at-risk scores, and fitting.

Each pair's equivalence probability is modeled as a normal distribution
whose moments are a weight-normalized blend of the activated rule priors
and the classifier's own output (the latter entering as one more evidence
source with a confidence-proportional weight and a calibrated per-bin
variance). The value-at-risk of labeling the pair matching/unmatching is
read off the distribution at a fixed confidence level. Rule weights,
rule variances, and the classifier-evidence scale are fitted on labeled
validation data so that mispredicted pairs outrank correct ones by risk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .errors import EmptyPartitionError, ParseError
from .riskfeat import RiskFeature, load_rules, save_rules

DNN_WEIGHT_FLOOR = 1e-3
SIGMA2_HAT_FLOOR = 1e-4
DEFAULT_THETA = 0.975
DEFAULT_BINS = 10


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    # inverse of log(1 + e^x); y must be positive
    return np.log(np.expm1(y))


def quantile_multiplier(theta: float) -> float:
    """Sigma multiplier at the confidence level; exactly 2 at the default."""
    if theta == DEFAULT_THETA:
        return 2.0
    if not 0.5 < theta < 1.0:
        raise ValueError(f"confidence level must be in (0.5, 1), got {theta}")
    return float(norm.ppf(theta))


@dataclass
class DnnRiskFeature:
    """The classifier output as one evidence source.

    ``sigma2`` holds per-bin variances of the ground-truth label within
    equal-width confidence bins; ``u_raw`` parameterizes (via softplus) the
    learnable scale of the confidence-proportional weight.
    """

    sigma2: np.ndarray  # (bins,)
    u_raw: float

    @property
    def bins(self) -> int:
        return len(self.sigma2)

    @property
    def u(self) -> float:
        return float(softplus(self.u_raw))

    def bin_of(self, mu_hat: np.ndarray) -> np.ndarray:
        return np.minimum((np.asarray(mu_hat) * self.bins).astype(np.int64), self.bins - 1)

    def sigma2_of(self, mu_hat: np.ndarray) -> np.ndarray:
        return self.sigma2[self.bin_of(mu_hat)]

    def weight_of(self, mu_hat: np.ndarray) -> np.ndarray:
        return self.u * 2.0 * np.abs(np.asarray(mu_hat) - 0.5) + DNN_WEIGHT_FLOOR


def dnn_feature_fit(mu_hat: np.ndarray, y: np.ndarray, bins: int = DEFAULT_BINS,
                    u_raw: float | None = None) -> DnnRiskFeature:
    """Calibrate per-bin label variances from validation predictions.

    Empty bins inherit the average of their nearest populated neighbors;
    every bin variance is floored. The weight scale starts at 1 unless a
    previous raw value is carried over.
    """
    mu_hat = np.asarray(mu_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(mu_hat) == 0:
        raise ValueError("cannot calibrate on empty validation data")
    if len(np.unique(y)) < 2:
        raise ValueError("calibration needs both classes in validation")
    idx = np.minimum((mu_hat * bins).astype(np.int64), bins - 1)
    sigma2 = np.full(bins, np.nan)
    for b in range(bins):
        members = y[idx == b]
        if len(members):
            sigma2[b] = max(float(np.var(members)), SIGMA2_HAT_FLOOR)
    filled = np.where(~np.isnan(sigma2))[0]
    for b in np.where(np.isnan(sigma2))[0]:
        left = filled[filled < b]
        right = filled[filled > b]
        neighbors = []
        if len(left):
            neighbors.append(sigma2[left[-1]])
        if len(right):
            neighbors.append(sigma2[right[0]])
        sigma2[b] = float(np.mean(neighbors))
    if u_raw is None:
        u_raw = float(inv_softplus(1.0))
    return DnnRiskFeature(sigma2=sigma2, u_raw=u_raw)


@dataclass
class EquivalenceDistribution:
    mu: float
    sigma2: float


@dataclass
class RiskScore:
    var_plus: float   # risk of labeling the pair matching
    var_minus: float  # risk of labeling the pair unmatching


@dataclass(frozen=True)
class RankFitConfig:
    margin: float = 0.3
    pair_samples: int = 64
    steps: int = 200
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")


@dataclass
class RiskModel:
    """The learnable risk scorer: rule features plus the classifier feature.

    Rule priors ``mu_f`` are frozen; weights and variances live in raw
    (softplus/log) parameterizations so they stay positive through fitting.
    """

    features: list[RiskFeature]
    weight_raw: np.ndarray  # (m,) softplus -> rule weights
    log_sigma2: np.ndarray  # (m,) exp -> rule variances
    dnn: DnnRiskFeature
    theta: float = DEFAULT_THETA

    @property
    def m(self) -> int:
        return len(self.features)

    @property
    def k(self) -> float:
        return quantile_multiplier(self.theta)

    @property
    def rule_weights(self) -> np.ndarray:
        return softplus(self.weight_raw)

    @property
    def rule_mu(self) -> np.ndarray:
        return np.array([f.mu_f for f in self.features])

    @property
    def rule_sigma2(self) -> np.ndarray:
        return np.exp(self.log_sigma2)

    @classmethod
    def initial(cls, features: Sequence[RiskFeature], dnn: DnnRiskFeature,
                theta: float = DEFAULT_THETA) -> "RiskModel":
        m = len(features)
        return cls(
            features=list(features),
            weight_raw=np.full(m, inv_softplus(1.0)),
            log_sigma2=np.log(np.array([f.sigma2_f for f in features])) if m else np.zeros(0),
            dnn=dnn,
            theta=theta,
        )

    def copy(self) -> "RiskModel":
        return RiskModel(list(self.features), self.weight_raw.copy(),
                         self.log_sigma2.copy(),
                         DnnRiskFeature(self.dnn.sigma2.copy(), self.dnn.u_raw),
                         self.theta)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def weighted_moments(z: np.ndarray, w: np.ndarray, mu_f: np.ndarray, sigma2_f: np.ndarray,
                     w_hat: np.ndarray, mu_hat: np.ndarray, sigma2_hat: np.ndarray):
    """Weight-normalized mean and variance of the evidence blend.

    ``z`` is (n, m) activations; the remaining rule arrays are (m,) and the
    classifier arrays (n,). Returns (mu, sigma2, normalizer), each (n,).
    """
    n_factor = z @ w + w_hat
    mu = (z @ (w * mu_f) + w_hat * mu_hat) / n_factor
    sigma2 = (z @ (w * w * sigma2_f) + w_hat * w_hat * sigma2_hat) / (n_factor * n_factor)
    return mu, sigma2, n_factor


def aggregate(model: RiskModel, z: np.ndarray, mu_hat: float) -> EquivalenceDistribution:
    """Blend activated rule priors with the classifier output for one pair."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.m,):
        raise ValueError(f"activation vector must have length {model.m}, got {z.shape}")
    mu_arr = np.array([mu_hat])
    mu, sigma2, _ = weighted_moments(
        z[None, :], model.rule_weights, model.rule_mu, model.rule_sigma2,
        model.dnn.weight_of(mu_arr), mu_arr, model.dnn.sigma2_of(mu_arr),
    )
    return EquivalenceDistribution(float(mu[0]), float(sigma2[0]))


def score_var(dist: EquivalenceDistribution, model: RiskModel) -> RiskScore:
    """Value-at-risk of the matching and unmatching labels, clamped to [0, 1]."""
    sigma = math.sqrt(dist.sigma2)
    k = model.k
    var_plus = min(1.0, max(0.0, (1.0 - dist.mu) + k * sigma))
    var_minus = min(1.0, max(0.0, dist.mu + k * sigma))
    return RiskScore(var_plus, var_minus)


@dataclass
class ScoredWorkload:
    """Risk artifacts of one frozen (classifier, risk model) pass on a pair set."""

    ids: list[str]
    z: np.ndarray            # (n, m)
    mu_hat: np.ndarray       # (n,)
    mu: np.ndarray
    sigma2: np.ndarray
    var_plus: np.ndarray
    var_minus: np.ndarray
    predicted: np.ndarray    # 1 where mu_hat >= 0.5
    w_hat_norm: np.ndarray   # classifier-evidence weight / normalizer

    @property
    def risk(self) -> np.ndarray:
        return np.where(self.predicted == 1, self.var_plus, self.var_minus)


def score_workload(model: RiskModel, ids: Sequence[str], z: np.ndarray,
                   mu_hat: np.ndarray) -> ScoredWorkload:
    z = np.asarray(z, dtype=np.float64)
    mu_hat = np.asarray(mu_hat, dtype=np.float64)
    w_hat = model.dnn.weight_of(mu_hat)
    mu, sigma2, n_factor = weighted_moments(
        z, model.rule_weights, model.rule_mu, model.rule_sigma2,
        w_hat, mu_hat, model.dnn.sigma2_of(mu_hat),
    )
    sigma = np.sqrt(sigma2)
    k = model.k
    return ScoredWorkload(
        ids=list(ids),
        z=z,
        mu_hat=mu_hat,
        mu=mu,
        sigma2=sigma2,
        var_plus=np.clip((1.0 - mu) + k * sigma, 0.0, 1.0),
        var_minus=np.clip(mu + k * sigma, 0.0, 1.0),
        predicted=(mu_hat >= 0.5).astype(np.int64),
        w_hat_norm=w_hat / n_factor,
    )


def rank_by_risk(model: RiskModel, scored: ScoredWorkload) -> list[tuple[str, float]]:
    """Pairs ordered by descending risk of their predicted label; ties by id."""
    items = list(zip(scored.ids, scored.risk))
    items.sort(key=lambda item: (-item[1], item[0]))
    return [(pid, float(r)) for pid, r in items]


def ranked_risk_table(model: RiskModel, scored: ScoredWorkload,
                      meta: Sequence[str] = ()) -> str:
    """Delimited ranked-risk report: pair id, predicted label, risk, mu, sigma."""
    from .tables import format_table

    index = {pid: i for i, pid in enumerate(scored.ids)}
    rows = []
    for pid, risk in rank_by_risk(model, scored):
        i = index[pid]
        rows.append((pid, int(scored.predicted[i]), risk,
                     float(scored.mu[i]), float(math.sqrt(scored.sigma2[i]))))
    return format_table(list(meta), ["pair_id", "predicted", "risk", "mu", "sigma"], rows)


# ---------------------------------------------------------------------------
# learn-to-rank fitting
# ---------------------------------------------------------------------------

def _risk_and_grads(weight_raw, log_sigma2, u_raw, model, z, mu_hat, predicted):
    """Risk of each instance's predicted label plus gradients w.r.t. the raw
    parameters. Shapes: risk (n,), d_weight (n, m), d_sigma (n, m), d_u (n,)."""
    w = softplus(weight_raw)
    s2f = np.exp(log_sigma2)
    u = float(softplus(u_raw))
    conf = 2.0 * np.abs(mu_hat - 0.5)
    w_hat = u * conf + DNN_WEIGHT_FLOOR
    s2_hat = model.dnn.sigma2_of(mu_hat)
    mu_f = model.rule_mu

    n_factor = z @ w + w_hat
    s1 = z @ (w * mu_f) + w_hat * mu_hat
    mu = s1 / n_factor
    v = z @ (w * w * s2f) + w_hat * w_hat * s2_hat
    sqrt_v = np.sqrt(v)
    sigma = sqrt_v / n_factor
    k = model.k

    sign_mu = np.where(predicted == 1, -1.0, 1.0)   # var+: -mu + k*sigma; var-: +mu + k*sigma
    raw = np.where(predicted == 1, (1.0 - mu) + k * sigma, mu + k * sigma)
    live = ((raw > 0.0) & (raw < 1.0)).astype(np.float64)
    risk = np.clip(raw, 0.0, 1.0)

    inv_n = 1.0 / n_factor
    # d mu / d w_j = z_j (mu_f_j - mu) / N ; d sigma / d w_j = z_j (w_j s2f_j / (sqrtV N) - sigma / N)
    dmu_dw = z * (mu_f[None, :] - mu[:, None]) * inv_n[:, None]
    dsig_dw = z * ((w * s2f)[None, :] / (sqrt_v * n_factor)[:, None] - (sigma * inv_n)[:, None])
    drisk_dw = sign_mu[:, None] * dmu_dw + k * dsig_dw
    # d sigma / d s2f_j = z_j w_j^2 / (2 sqrtV N)
    drisk_ds2f = k * z * (w * w)[None, :] / (2.0 * sqrt_v * n_factor)[:, None]
    # classifier-evidence weight channel
    dmu_dwhat = (mu_hat - mu) * inv_n
    dsig_dwhat = w_hat * s2_hat / (sqrt_v * n_factor) - sigma * inv_n
    drisk_dwhat = sign_mu * dmu_dwhat + k * dsig_dwhat

    gate = live[:, None]
    d_weight_raw = gate * drisk_dw * (1.0 / (1.0 + np.exp(-weight_raw)))[None, :]
    d_log_sigma2 = gate * drisk_ds2f * s2f[None, :]
    d_u_raw = live * drisk_dwhat * conf * (1.0 / (1.0 + math.exp(-u_raw)))
    return risk, d_weight_raw, d_log_sigma2, d_u_raw


def hinge_objective(weight_raw, log_sigma2, u_raw, model, scored: ScoredWorkload,
                    idx_wrong: np.ndarray, idx_right: np.ndarray, margin: float):
    """Mean pairwise hinge of sampled (mispredicted, correct) index pairs
    plus its gradients w.r.t. the raw parameters."""
    take = np.concatenate([idx_wrong, idx_right])
    risk, d_w, d_s, d_u = _risk_and_grads(
        weight_raw, log_sigma2, u_raw, model,
        scored.z[take], scored.mu_hat[take], scored.predicted[take],
    )
    b = len(idx_wrong)
    gap = margin - (risk[:b] - risk[b:])
    active = gap > 0.0
    loss = float(np.mean(np.maximum(gap, 0.0)))
    coef = np.concatenate([-active.astype(np.float64), active.astype(np.float64)]) / b
    return loss, coef @ d_w, coef @ d_s, float(coef @ d_u)


def fit_ranking(model: RiskModel, scored_val: ScoredWorkload, y_val: np.ndarray,
                config: RankFitConfig) -> RiskModel:
    """Tune rule weights, rule variances, and the classifier-evidence scale
    so mispredicted validation pairs outrank correct ones by risk.

    Minimizes a sampled pairwise hinge by plain gradient steps on the raw
    parameterizations. Rule priors are prior knowledge and never change.
    Raises EmptyPartitionError when validation has no misprediction or no
    correct prediction; callers should then keep the previous model.
    """
    y_val = np.asarray(y_val, dtype=np.int64)
    wrong = np.where(scored_val.predicted != y_val)[0]
    right = np.where(scored_val.predicted == y_val)[0]
    if len(wrong) == 0 or len(right) == 0:
        raise EmptyPartitionError(
            "validation lacks a mispredicted or a correct instance; "
            "skip the refit and keep the previous risk model"
        )
    rng = np.random.default_rng(config.seed)
    weight_raw = model.weight_raw.copy()
    log_sigma2 = model.log_sigma2.copy()
    u_raw = model.dnn.u_raw
    for _ in range(config.steps):
        idx_wrong = rng.choice(wrong, size=config.pair_samples, replace=True)
        idx_right = rng.choice(right, size=config.pair_samples, replace=True)
        _, g_w, g_s, g_u = hinge_objective(
            weight_raw, log_sigma2, u_raw, model, scored_val, idx_wrong, idx_right,
            config.margin,
        )
        weight_raw -= config.learning_rate * g_w
        log_sigma2 -= config.learning_rate * g_s
        u_raw -= config.learning_rate * g_u
    return RiskModel(list(model.features), weight_raw, log_sigma2,
                     DnnRiskFeature(model.dnn.sigma2.copy(), u_raw), model.theta)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

RISKMODEL_VERSION = 1


def save_risk_model(model: RiskModel, channel_names: Sequence[str], path: str | Path) -> None:
    """Sectioned text dump: rule lines, raw parameters, classifier feature."""
    path = Path(path)
    rules_with_current = [
        replace(f, sigma2_f=float(s2)) for f, s2 in zip(model.features, model.rule_sigma2)
    ]
    lines = [f"# riskmodel v{RISKMODEL_VERSION}", f"theta\t{model.theta!r}", "[rules]"]
    tmp = path.with_suffix(path.suffix + ".rules~")
    save_rules(rules_with_current, channel_names, tmp)
    lines.extend(tmp.read_text(encoding="utf-8").splitlines())
    tmp.unlink()
    lines.append("[params]")
    for feature, w_raw, ls2 in zip(model.features, model.weight_raw, model.log_sigma2):
        lines.append(f"{feature.id}\t{float(w_raw)!r}\t{float(ls2)!r}")
    lines.append("[dnn]")
    lines.append(f"u_raw\t{float(model.dnn.u_raw)!r}")
    lines.append("sigma2\t" + ",".join(repr(float(v)) for v in model.dnn.sigma2))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_risk_model(path: str | Path) -> tuple[RiskModel, list[str]]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"# riskmodel v{RISKMODEL_VERSION}":
        raise ParseError(f"{path}: not a v{RISKMODEL_VERSION} risk-model file")
    theta = float(lines[1].split("\t")[1])
    i_rules = lines.index("[rules]")
    i_params = lines.index("[params]")
    i_dnn = lines.index("[dnn]")
    tmp = path.with_suffix(path.suffix + ".rules~")
    tmp.write_text("\n".join(lines[i_rules + 1 : i_params]) + "\n", encoding="utf-8")
    features, names = load_rules(tmp)
    tmp.unlink()
    raw_by_id = {}
    for line in lines[i_params + 1 : i_dnn]:
        rule_id, w_raw, ls2 = line.split("\t")
        raw_by_id[rule_id] = (float(w_raw), float(ls2))
    weight_raw = np.array([raw_by_id[f.id][0] for f in features])
    log_sigma2 = np.array([raw_by_id[f.id][1] for f in features])
    u_raw = float(lines[i_dnn + 1].split("\t")[1])
    sigma2 = np.array([float(v) for v in lines[i_dnn + 2].split("\t")[1].split(",")])
    model = RiskModel(features, weight_raw, log_sigma2, DnnRiskFeature(sigma2, u_raw), theta)
    return model, names
