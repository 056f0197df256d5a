"""Interpretable one-sided rule features harvested from shallow trees.

Trees are grown greedily on bootstrap samples of the labeled training
pairs; every leaf whose root-to-leaf conjunction is sufficiently pure and
well covered on the *full* training set is emitted as a rule asserting its
majority class. Rules indicate exactly one class, so a classifier
prediction contradicting an activated rule signals misprediction risk.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError

ASSERT_EQUIVALENT = 1
ASSERT_INEQUIVALENT = 0

_CLASS_TEXT = {ASSERT_EQUIVALENT: "equivalent", ASSERT_INEQUIVALENT: "inequivalent"}
_TEXT_CLASS = {v: k for k, v in _CLASS_TEXT.items()}

DEFAULT_SIGMA2 = 0.01


@dataclass(frozen=True)
class Predicate:
    """A threshold test on one similarity channel."""

    channel: int
    op: str  # "<=" or ">"
    threshold: float

    def __post_init__(self) -> None:
        if self.op not in ("<=", ">"):
            raise ValueError(f"comparator must be <= or >, got {self.op!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0,1], got {self.threshold}")

    def holds(self, x: np.ndarray) -> np.ndarray:
        col = x[..., self.channel]
        return col <= self.threshold if self.op == "<=" else col > self.threshold


@dataclass
class RiskFeature:
    """One conjunction rule with its equivalence-probability prior."""

    id: str
    predicates: tuple[Predicate, ...]
    asserted_class: int
    coverage: int
    mu_f: float
    sigma2_f: float = DEFAULT_SIGMA2


@dataclass(frozen=True)
class RuleParams:
    """Induction knobs.

    ``threshold_grid`` quantizes candidate split thresholds so that
    near-identical conjunctions from different trees collapse into exact
    duplicates (0 keeps raw split midpoints).
    """

    trees: int = 10
    depth: int = 3
    purity: float = 0.95
    min_coverage: float = 0.01
    feature_subsample: float = 0.6
    threshold_grid: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.trees < 1 or self.depth < 1:
            raise ValueError("trees and depth must be >= 1")
        if not 0.5 < self.purity <= 1.0:
            raise ValueError("purity threshold must be in (0.5, 1]")
        if not 0.0 < self.feature_subsample <= 1.0:
            raise ValueError("feature_subsample must be in (0, 1]")
        if self.threshold_grid < 0:
            raise ValueError("threshold_grid must be >= 0")


def _entropy(y: np.ndarray) -> float:
    n = len(y)
    if n == 0:
        return 0.0
    p = float(np.mean(y))
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log(p) - (1 - p) * math.log(1 - p)


def _best_split(x: np.ndarray, y: np.ndarray, channels: np.ndarray, grid: float):
    """Highest information-gain (channel, threshold); ties prefer the
    lowest channel index then the lowest threshold."""
    parent = _entropy(y)
    n = len(y)
    best = None
    best_gain = 1e-12
    for ch in sorted(int(c) for c in channels):
        values = np.unique(x[:, ch])
        if len(values) < 2:
            continue
        thresholds = (values[:-1] + values[1:]) / 2.0
        if grid > 0:
            thresholds = np.unique(np.clip(np.round(thresholds / grid) * grid, 0.0, 1.0))
        for t in thresholds:
            mask = x[:, ch] <= t
            n_left = int(mask.sum())
            if n_left == 0 or n_left == n:
                continue
            gain = parent - (
                n_left / n * _entropy(y[mask]) + (n - n_left) / n * _entropy(y[~mask])
            )
            if gain > best_gain:
                best_gain = gain
                best = (ch, float(t))
    return best


def _grow(x: np.ndarray, y: np.ndarray, idx: np.ndarray, path: tuple[Predicate, ...],
          depth: int, params: RuleParams, rng: np.random.Generator,
          leaves: list[tuple[Predicate, ...]]) -> None:
    sub_y = y[idx]
    if depth == params.depth or len(idx) < 2 or len(np.unique(sub_y)) < 2:
        if path:
            leaves.append(path)
        return
    n_channels = x.shape[1]
    k = max(1, round(params.feature_subsample * n_channels))
    channels = rng.choice(n_channels, size=k, replace=False)
    split = _best_split(x[idx], sub_y, channels, params.threshold_grid)
    if split is None:
        if path:
            leaves.append(path)
        return
    ch, t = split
    mask = x[idx, ch] <= t
    _grow(x, y, idx[mask], path + (Predicate(ch, "<=", t),), depth + 1, params, rng, leaves)
    _grow(x, y, idx[~mask], path + (Predicate(ch, ">", t),), depth + 1, params, rng, leaves)


def _conjunction_mask(predicates: Sequence[Predicate], x: np.ndarray) -> np.ndarray:
    mask = np.ones(len(x), dtype=bool)
    for pred in predicates:
        mask &= pred.holds(x)
    return mask


def _canonical(predicates: Sequence[Predicate]) -> tuple:
    return tuple(sorted((p.channel, p.op, p.threshold) for p in predicates))


def _rule_id(predicates: Sequence[Predicate], asserted_class: int) -> str:
    text = ";".join(f"{c}{op}{t!r}" for c, op, t in _canonical(predicates))
    digest = hashlib.sha1(f"{text}->{asserted_class}".encode()).hexdigest()
    return f"rf_{digest[:10]}"


def estimate_prior(predicates: Sequence[Predicate], x: np.ndarray, y: np.ndarray) -> float:
    """Smoothed equivalence rate (n+ + 1)/(n + 2) over covered instances."""
    mask = _conjunction_mask(predicates, x)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("rule covers no training instances")
    n_pos = int(y[mask].sum())
    return (n_pos + 1) / (n + 2)


def induce_rules(x: np.ndarray, y: np.ndarray, params: RuleParams) -> list[RiskFeature]:
    """Harvest one-sided rules from bagged shallow trees.

    Every candidate leaf conjunction is re-evaluated on the full training
    set; it becomes a rule only if its majority-class purity and coverage
    there clear the configured thresholds. Output is deduplicated and
    canonically ordered, deterministic from the seed.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0 or len(np.unique(y)) < 2:
        raise ValueError("rule induction needs training data with both classes")
    rng = np.random.default_rng(params.seed)
    n = len(x)
    min_cover = max(1, math.ceil(params.min_coverage * n))

    leaves: list[tuple[Predicate, ...]] = []
    for _ in range(params.trees):
        boot = rng.integers(0, n, size=n)
        _grow(x, y, boot, (), 0, params, rng, leaves)

    rules: dict[tuple, RiskFeature] = {}
    for predicates in leaves:
        mask = _conjunction_mask(predicates, x)
        coverage = int(mask.sum())
        if coverage < min_cover:
            continue
        n_pos = int(y[mask].sum())
        if n_pos * 2 == coverage:
            continue  # no strict majority, cannot be one-sided
        asserted = ASSERT_EQUIVALENT if n_pos * 2 > coverage else ASSERT_INEQUIVALENT
        purity = max(n_pos, coverage - n_pos) / coverage
        if purity < params.purity:
            continue
        key = (_canonical(predicates), asserted)
        if key in rules:
            continue
        mu = estimate_prior(predicates, x, y)
        ordered = tuple(sorted(predicates, key=lambda p: (p.channel, p.op, p.threshold)))
        rules[key] = RiskFeature(
            id=_rule_id(ordered, asserted),
            predicates=ordered,
            asserted_class=asserted,
            coverage=coverage,
            mu_f=mu,
        )
    return [rules[k] for k in sorted(rules)]


def activate(features: Sequence[RiskFeature], x: np.ndarray) -> np.ndarray:
    """0/1 activation bits of every rule for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    return np.array([int(_conjunction_mask(f.predicates, x[None, :]).all()) for f in features],
                    dtype=np.int64)


def activation_matrix(features: Sequence[RiskFeature], x: np.ndarray) -> np.ndarray:
    """Stacked activations: rows are pairs, columns are rules."""
    x = np.asarray(x, dtype=np.float64)
    if not features:
        return np.zeros((len(x), 0), dtype=np.float64)
    cols = [_conjunction_mask(f.predicates, x).astype(np.float64) for f in features]
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# rendering and persistence
# ---------------------------------------------------------------------------

def render_rule(rule: RiskFeature, channel_names: Sequence[str]) -> str:
    """Canonical one-line form, e.g. "year_eq <= 0.5 -> inequivalent"."""
    parts = " AND ".join(
        f"{channel_names[p.channel]} {p.op} {p.threshold!r}" for p in rule.predicates
    )
    return f"{parts} -> {_CLASS_TEXT[rule.asserted_class]}"


def parse_rule_text(text: str, channel_names: Sequence[str]) -> tuple[tuple[Predicate, ...], int]:
    """Inverse of render_rule; exact for thresholds written with repr."""
    index = {name: i for i, name in enumerate(channel_names)}
    try:
        conj, _, cls_text = text.rpartition(" -> ")
        asserted = _TEXT_CLASS[cls_text.strip()]
        predicates = []
        for clause in conj.split(" AND "):
            name, op, threshold = clause.strip().split(" ")
            predicates.append(Predicate(index[name], op, float(threshold)))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"cannot parse rule {text!r}: {exc}") from exc
    return tuple(predicates), asserted


RULESET_VERSION = 1


def save_rules(features: Sequence[RiskFeature], channel_names: Sequence[str],
               path: str | Path) -> None:
    lines = [f"# ruleset v{RULESET_VERSION}", "# channels: " + ",".join(channel_names)]
    for rule in features:
        lines.append("\t".join([
            rule.id,
            render_rule(rule, channel_names),
            str(rule.coverage),
            repr(rule.mu_f),
            repr(rule.sigma2_f),
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_rules(path: str | Path) -> tuple[list[RiskFeature], list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or lines[0] != f"# ruleset v{RULESET_VERSION}":
        raise ParseError(f"{path}: not a v{RULESET_VERSION} ruleset file")
    names = lines[1].removeprefix("# channels: ").split(",")
    features = []
    for line_no, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        try:
            rule_id, rule_text, coverage, mu, sigma2 = line.split("\t")
        except ValueError:
            raise ParseError(f"{path}: line {line_no}: expected 5 tab-separated fields") from None
        predicates, asserted = parse_rule_text(rule_text, names)
        features.append(RiskFeature(rule_id, predicates, asserted,
                                    int(coverage), float(mu), float(sigma2)))
    return features, names
