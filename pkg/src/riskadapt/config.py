"""Run configuration: one YAML file drives every pipeline command.

Exactly one data source is declared, either delimited-text files or a
two-source synthetic spec. All randomness flows from seeds in this file
(optionally overridden by --seed); no command reads the clock or OS
entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from .classifier import TrainConfig
from .corpus import NUMERIC, TEXT, AttributeSpec, Schema, SYNTHETIC_SCHEMA, SyntheticSpec
from .errors import ConfigError
from .riskfeat import RuleParams
from .riskmodel import DEFAULT_BINS, DEFAULT_THETA, RankFitConfig


@dataclass(frozen=True)
class FileData:
    left: Path
    right: Path
    pairs: Path


@dataclass(frozen=True)
class RunConfig:
    out_dir: Path
    seed: int
    schema: Schema
    synthetic: tuple[SyntheticSpec, SyntheticSpec] | None
    files: FileData | None
    min_shared_tokens: int
    split_ratios: tuple[float, float, float]
    hidden: int
    train: TrainConfig
    rules: RuleParams
    ranking: RankFitConfig
    theta: float
    bins: int

    def but(self, *, seed: int | None = None, out_dir: Path | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed),
                          rules=replace(cfg.rules, seed=seed),
                          ranking=replace(cfg.ranking, seed=seed))
        if out_dir is not None:
            cfg = replace(cfg, out_dir=Path(out_dir))
        return cfg


def _require_mapping(node, what: str) -> dict:
    if not isinstance(node, dict):
        raise ConfigError(f"{what} must be a mapping, got {type(node).__name__}")
    return node


def _schema_from(node) -> Schema:
    attrs = []
    for entry in node:
        entry = _require_mapping(entry, "schema entry")
        kind = entry.get("kind", TEXT)
        if kind not in (TEXT, NUMERIC):
            raise ConfigError(f"schema kind must be text or numeric, got {kind!r}")
        attrs.append(AttributeSpec(entry["name"], kind,
                                   float(entry.get("range", 1.0))))
    if not attrs:
        raise ConfigError("schema must declare at least one attribute")
    return tuple(attrs)


def _synthetic_from(node, default_seed: int) -> tuple[SyntheticSpec, SyntheticSpec]:
    sources = node.get("sources")
    if not isinstance(sources, list) or len(sources) != 2:
        raise ConfigError("synthetic data needs exactly 2 sources")
    specs = []
    for i, src in enumerate(sources):
        src = _require_mapping(src, "synthetic source")
        specs.append(SyntheticSpec(
            n_entities=int(src["n_entities"]),
            duplicates_per_entity=int(src.get("duplicates_per_entity", 2)),
            corruption_level=float(src.get("corruption_level", 0.0)),
            seed=int(src.get("seed", default_seed + i)),
        ))
    return specs[0], specs[1]


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = _require_mapping(yaml.safe_load(path.read_text(encoding="utf-8")), "config")

    seed = int(raw.get("seed", 0))
    data = _require_mapping(raw.get("data", {}), "data")
    has_files = "files" in data
    has_synth = "synthetic" in data
    if has_files == has_synth:
        raise ConfigError("declare exactly one of data.files or data.synthetic")

    files = None
    synthetic = None
    if has_files:
        node = _require_mapping(data["files"], "data.files")
        try:
            files = FileData(Path(node["left"]), Path(node["right"]), Path(node["pairs"]))
        except KeyError as missing:
            raise ConfigError(f"data.files requires key {missing}") from None
        if "schema" not in raw:
            raise ConfigError("file data requires an explicit schema")
        schema = _schema_from(raw["schema"])
    else:
        synthetic = _synthetic_from(_require_mapping(data["synthetic"], "data.synthetic"), seed)
        schema = SYNTHETIC_SCHEMA

    split = _require_mapping(raw.get("split", {}), "split")
    ratios = tuple(float(r) for r in split.get("ratios", (0.2, 0.2, 0.6)))
    if len(ratios) != 3:
        raise ConfigError("split.ratios must have three entries")

    blocking = _require_mapping(raw.get("blocking", {}), "blocking")
    clf = _require_mapping(raw.get("classifier", {}), "classifier")
    rf = _require_mapping(raw.get("riskfeat", {}), "riskfeat")
    rm = _require_mapping(raw.get("riskmodel", {}), "riskmodel")

    try:
        train = TrainConfig(
            learning_rate=float(clf.get("learning_rate", 1e-3)),
            pretrain_epochs=int(clf.get("pretrain_epochs", 20)),
            risk_epochs=int(clf.get("risk_epochs", 10)),
            batch_size=int(clf.get("batch_size", 32)),
            beta1=float(clf.get("beta1", 0.9)),
            beta2=float(clf.get("beta2", 0.999)),
            eps=float(clf.get("eps", 1e-8)),
            risk_lr_scale=float(clf.get("risk_lr_scale", 0.1)),
            seed=seed,
        )
        rules = RuleParams(
            trees=int(rf.get("trees", 10)),
            depth=int(rf.get("depth", 3)),
            purity=float(rf.get("purity", 0.95)),
            min_coverage=float(rf.get("min_coverage", 0.01)),
            feature_subsample=float(rf.get("feature_subsample", 0.6)),
            threshold_grid=float(rf.get("threshold_grid", 0.0)),
            seed=seed,
        )
        ranking = RankFitConfig(
            margin=float(rm.get("margin", 0.3)),
            pair_samples=int(rm.get("pair_samples", 64)),
            steps=int(rm.get("steps", 200)),
            learning_rate=float(rm.get("learning_rate", 0.05)),
            seed=seed,
        )
    except ValueError as bad:
        raise ConfigError(f"invalid configuration value: {bad}") from bad

    return RunConfig(
        out_dir=Path(raw.get("out_dir", "runs/out")),
        seed=seed,
        schema=schema,
        synthetic=synthetic,
        files=files,
        min_shared_tokens=int(blocking.get("min_shared_tokens", 1)),
        split_ratios=ratios,  # type: ignore[arg-type]
        hidden=int(clf.get("hidden", 32)),
        train=train,
        rules=rules,
        ranking=ranking,
        theta=float(rm.get("theta", DEFAULT_THETA)),
        bins=int(rm.get("bins", DEFAULT_BINS)),
    )


def config_echo(config: RunConfig) -> dict:
    """JSON-safe summary of a config, embedded in manifests and headers."""
    return {
        "seed": config.seed,
        "out_dir": str(config.out_dir),
        "data": ("files" if config.files else "synthetic"),
        "sources": ([str(config.files.left), str(config.files.right), str(config.files.pairs)]
                    if config.files else
                    [repr(s) for s in config.synthetic]),
        "schema": [(a.name, a.kind, a.num_range) for a in config.schema],
        "min_shared_tokens": config.min_shared_tokens,
        "split_ratios": list(config.split_ratios),
        "hidden": config.hidden,
        "train": repr(config.train),
        "rules": repr(config.rules),
        "ranking": repr(config.ranking),
        "theta": config.theta,
        "bins": config.bins,
    }
