"""Command-line entry point.

Subcommands: prepare, pretrain, finetune, eval, theory
{bounds|mcdiarmid|assumption1|deltas}, experiment. Every command reads one
YAML config (--config), writes into a run directory (--out), and derives
all randomness from config seeds (--seed overrides). Exit codes: 0
success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import flip_report, metrics_table, risk_phase
from .classifier import (
    init_model,
    load_checkpoint,
    predicted_labels,
    predict_proba,
    pretrain,
    save_checkpoint,
)
from .config import RunConfig, config_echo, load_config
from .corpus import (
    AttributeSpec,
    SplitFeatures,
    build_features,
    channel_names,
    generate_workload,
    labeled_candidates,
    load_pairs,
    load_records,
    split_dataset,
)
from .errors import ConfigError, RiskAdaptError
from .harness import f1 as f1_metric
from .harness import load_plan, run_experiment
from .riskfeat import activation_matrix, induce_rules, load_rules, save_rules
from .riskmodel import (
    load_risk_model,
    ranked_risk_table,
    save_risk_model,
    score_workload,
)
from .tables import format_table, write_versioned
from .theory import (
    BoundQuery,
    ConcentrationTrial,
    assumption1_diagnostic,
    estimate_deltas,
    mcdiarmid_table,
    supporter_counts,
    theorem_bound,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise _UsageError(message)


def _say(args, message: str) -> None:
    if not getattr(args, "quiet", False):
        print(message)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _npz_bytes(**arrays) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_features(out_dir: Path) -> SplitFeatures:
    schema_file = out_dir / "schema.json"
    features_file = out_dir / "features.npz"
    for needed in (schema_file, features_file):
        if not needed.exists():
            raise RiskAdaptError(f"missing artifact {needed}; run prepare first")
    schema_raw = json.loads(schema_file.read_text(encoding="utf-8"))
    schema = tuple(AttributeSpec(n, k, r) for n, k, r in schema_raw)
    with np.load(features_file) as data:
        y_test = data["y_test"] if "y_test" in data.files else None
        return SplitFeatures(
            channel_names(schema),
            [str(v) for v in data["train_ids"]], data["x_train"], data["y_train"],
            [str(v) for v in data["val_ids"]], data["x_val"], data["y_val"],
            [str(v) for v in data["test_ids"]], data["x_test"], y_test,
        )


def _prepare_pairs(config: RunConfig):
    if config.synthetic is not None:
        workload = generate_workload(config.synthetic)
        return workload.schema, labeled_candidates(workload, config.min_shared_tokens)
    files = config.files
    for path in (files.left, files.right, files.pairs):
        if not Path(path).exists():
            raise ConfigError(f"input path does not exist: {path}")
    left = load_records(files.left, config.schema)
    right = load_records(files.right, config.schema)
    pairs = load_pairs(files.pairs, left, right)
    if any(p.label is None for p in pairs):
        raise ConfigError(f"{files.pairs}: all pairs need labels for preparation")
    return config.schema, pairs


def cmd_prepare(args, config: RunConfig) -> int:
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    schema, pairs = _prepare_pairs(config)
    split = split_dataset(pairs, config.split_ratios, config.seed)
    data = build_features(split.train, split.validation, split.test, schema)

    write_versioned(out / "schema.json", json.dumps(
        [(a.name, a.kind, a.num_range) for a in schema], indent=2) + "\n")

    rows = [(part, p.left.id, p.right.id, p.label)
            for part, members in (("train", split.train), ("validation", split.validation),
                                  ("test", split.test))
            for p in members]
    write_versioned(out / "split.csv", format_table(
        [f"seed: {config.seed}", f"ratios: {list(config.split_ratios)}"],
        ["part", "left_id", "right_id", "label"], rows))

    arrays = dict(
        x_train=data.x_train, y_train=data.y_train,
        x_val=data.x_val, y_val=data.y_val,
        x_test=data.x_test,
        train_ids=np.array(data.train_ids), val_ids=np.array(data.val_ids),
        test_ids=np.array(data.test_ids),
    )
    if data.y_test is not None:
        arrays["y_test"] = data.y_test
    write_versioned(out / "features.npz", _npz_bytes(**arrays))

    artifact_names = ["schema.json", "split.csv", "features.npz"]
    manifest = {
        "tool": {"name": "riskadapt", "version": __version__},
        "config": config_echo(config),
        "artifacts": {name: _sha256(out / name) for name in artifact_names},
    }
    write_versioned(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _say(args, f"prepared {len(pairs)} pairs into {out} "
               f"(train {len(data.train_ids)} / val {len(data.val_ids)} / test {len(data.test_ids)})")
    return 0


def cmd_pretrain(args, config: RunConfig) -> int:
    out = config.out_dir
    data = _load_features(out)
    model = init_model(data.x_train.shape[1], config.hidden, config.seed)
    best, log = pretrain(model, data.x_train, data.y_train, data.x_val, data.y_val,
                         config.train)
    buf = io.BytesIO()
    save_checkpoint(best, buf)
    write_versioned(out / "checkpoint_pretrain.npz", buf.getvalue())
    rows = [(e.epoch, e.train_loss, e.val_f1) for e in log]
    write_versioned(out / "metrics_pretrain.csv", format_table(
        [f"seed: {config.seed}", f"epochs: {config.train.pretrain_epochs}"],
        ["epoch", "train_loss", "val_f1"], rows))
    _say(args, f"pretrained {config.train.pretrain_epochs} epochs; "
               f"best validation F1 {max(e.val_f1 for e in log):.4f}")
    return 0


def cmd_finetune(args, config: RunConfig) -> int:
    out = config.out_dir
    checkpoint = out / "checkpoint_pretrain.npz"
    if not checkpoint.exists():
        raise RiskAdaptError(f"missing {checkpoint}: run pretrain first")
    data = _load_features(out)
    model = load_checkpoint(checkpoint)
    final, risk_model, rules, ledger, metrics = risk_phase(
        model, data, config.train, config.rules, config.ranking,
        bins=config.bins, theta=config.theta)

    names = list(data.channel_names)
    buf = io.BytesIO()
    save_checkpoint(final, buf)
    write_versioned(out / "checkpoint_final.npz", buf.getvalue())
    save_rules(rules, names, out / "rules.txt.tmp")
    write_versioned(out / "rules.txt", (out / "rules.txt.tmp").read_bytes())
    (out / "rules.txt.tmp").unlink()
    save_risk_model(risk_model, names, out / "riskmodel.txt.tmp")
    write_versioned(out / "riskmodel.txt", (out / "riskmodel.txt.tmp").read_bytes())
    (out / "riskmodel.txt.tmp").unlink()
    write_versioned(out / "metrics_risk.csv",
                    metrics_table(metrics, [f"seed: {config.seed}"]))
    z_test = activation_matrix(rules, data.x_test)
    scored = score_workload(risk_model, data.test_ids,
                            z_test, predict_proba(final, data.x_test))
    write_versioned(out / "risk_ranking.csv",
                    ranked_risk_table(risk_model, scored, [f"seed: {config.seed}"]))
    if ledger.truth is not None and len(ledger.snapshots) >= 2:
        reports = [flip_report(ledger, k).to_table()
                   for k in range(len(ledger.snapshots) - 1)]
        write_versioned(out / "flip_report.csv", "".join(reports))
    _say(args, f"finetuned {config.train.risk_epochs} risk iterations; "
               f"{len(rules)} rules; artifacts in {out}")
    return 0


def _load_model_for_eval(out: Path, prefer_final: bool = True):
    final, pre = out / "checkpoint_final.npz", out / "checkpoint_pretrain.npz"
    if prefer_final and final.exists():
        return load_checkpoint(final), "final"
    if pre.exists():
        return load_checkpoint(pre), "pretrain"
    raise RiskAdaptError(f"no checkpoint under {out}: run pretrain first")


def cmd_eval(args, config: RunConfig) -> int:
    out = config.out_dir
    data = _load_features(out)
    if data.y_test is None:
        raise RiskAdaptError("test labels unavailable; nothing to score")
    model, which = _load_model_for_eval(out)
    pred = predicted_labels(model, data.x_test)
    precision, recall, score = f1_metric(pred, data.y_test)
    table = format_table(
        [f"checkpoint: {which}"],
        ["precision", "recall", "f1"], [(precision, recall, score)])
    write_versioned(out / "eval.txt", table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# theory subcommands
# ---------------------------------------------------------------------------

def cmd_theory_bounds(args, config) -> int:
    ns = [int(v) for v in args.sweep_n.split(",")] if args.sweep_n else [args.n]
    direction = "false_negative" if args.direction == "fn" else "false_positive"
    rows = []
    for n in ns:
        bound = theorem_bound(BoundQuery(args.m, n, args.delta, args.epsilon, direction))
        rows.append((args.m, n, args.delta, args.epsilon, direction, bound))
    print(format_table(
        ["closed-form expectation bound"],
        ["m", "n", "delta", "epsilon", "direction", "bound"], rows), end="")
    return 0


def cmd_theory_mcdiarmid(args, config) -> int:
    rng = np.random.default_rng(args.seed)
    m = args.m
    trial = ConcentrationTrial(
        activation_probs=tuple(float(v) for v in rng.uniform(0.05, 0.95, m)),
        weights=tuple(float(v) for v in rng.uniform(0.3, 2.0, m)),
        mu_f=tuple(float(v) for v in rng.uniform(size=m)),
        sigma2_f=tuple(float(v) for v in rng.uniform(0.005, 0.09, m)),
        samples=args.samples,
        seed=args.seed,
        mu_hat=args.mu_hat,
    )
    eps_grid = [float(v) for v in args.eps_grid.split(",")]
    print(mcdiarmid_table(trial, eps_grid), end="")
    return 0


def _scored_test(config: RunConfig, out: Path):
    data = _load_features(out)
    if data.y_test is None:
        raise RiskAdaptError("ground-truth test labels required for this diagnostic")
    rules_file = out / "rules.txt"
    if rules_file.exists():
        rules, names = load_rules(rules_file)
    else:
        rules = induce_rules(data.x_train, data.y_train, config.rules)
        names = list(data.channel_names)
    model, _ = _load_model_for_eval(out)
    return data, rules, names, model


def cmd_theory_assumption1(args, config: RunConfig) -> int:
    out = config.out_dir
    data, rules, names, model = _scored_test(config, out)
    z = activation_matrix(rules, data.x_test)
    pred = predicted_labels(model, data.x_test)
    y = data.y_test
    groups = {
        "TP": z[(pred == 1) & (y == 1)],
        "FN": z[(pred == 0) & (y == 1)],
        "TN": z[(pred == 0) & (y == 0)],
        "FP": z[(pred == 1) & (y == 0)],
    }
    report = assumption1_diagnostic(groups, [r.id for r in rules])
    table = report.to_table()
    write_versioned(out / "assumption1.csv", table)
    print(table, end="")
    return 0


def cmd_theory_deltas(args, config: RunConfig) -> int:
    out = config.out_dir
    model_file = out / "riskmodel.txt"
    if not model_file.exists():
        raise RiskAdaptError(f"missing {model_file}: run finetune first")
    risk_model, _ = load_risk_model(model_file)
    data, rules, names, model = _scored_test(config, out)
    z = activation_matrix(risk_model.features, data.x_test)
    scored = score_workload(risk_model, data.test_ids, z, predict_proba(model, data.x_test))
    y = data.y_test
    counts = supporter_counts(scored, y)
    wrong = np.where(scored.predicted != y)[0]
    if args.pair_id:
        try:
            chosen = [data.test_ids.index(args.pair_id)]
        except ValueError:
            raise RiskAdaptError(f"unknown pair id {args.pair_id!r}") from None
    else:
        order = sorted(wrong, key=lambda i: (-scored.risk[i], scored.ids[i]))
        chosen = list(order[: args.top])
    rows = []
    for i in chosen:
        est = estimate_deltas(risk_model, scored, y, scored.ids[i])
        status = "FN" if scored.predicted[i] == 0 else "FP"
        rows.append((scored.ids[i], status, int(counts[i]), est.delta_var,
                     est.delta_c_lemma, est.delta_c_simple))
    mean_w = float(np.mean(scored.w_hat_norm))
    table = format_table(
        [f"mispredictions on test: {len(wrong)}",
         f"mean classifier-evidence weight: {mean_w!r} (reference band 0.2..0.6)"],
        ["pair_id", "status", "supporters", "delta_var", "delta_c_lemma", "delta_c_simple"],
        rows)
    write_versioned(out / "deltas.csv", table)
    print(table, end="")
    return 0


def cmd_experiment(args, config) -> int:
    plan = load_plan(args.plan)
    out = Path(args.out) if args.out else Path("runs") / plan.scenario
    result = run_experiment(plan)
    table_path = write_versioned(out / f"{plan.scenario}.csv", result.table)
    from .report import render_figures

    figures = render_figures(result, out)
    if not getattr(args, "quiet", False):
        print(result.table, end="")
        print(f"# table: {table_path}")
        for fig in figures:
            print(f"# figure: {fig}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = _Parser(prog="riskadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("prepare", cmd_prepare), ("pretrain", cmd_pretrain),
                     ("finetune", cmd_finetune), ("eval", cmd_eval)):
        p = sub.add_parser(name, parents=[common])
        p.set_defaults(handler=fn, needs_config=True)

    theory = sub.add_parser("theory", parents=[common])
    tsub = theory.add_subparsers(dest="theory_command", required=True)

    bounds = tsub.add_parser("bounds", parents=[common])
    bounds.add_argument("--m", type=int, required=True)
    bounds.add_argument("--n", type=int, default=100)
    bounds.add_argument("--delta", type=float, default=0.05)
    bounds.add_argument("--epsilon", type=float, default=0.2)
    bounds.add_argument("--direction", choices=("fn", "fp"), default="fn")
    bounds.add_argument("--sweep-n", help="comma-separated supporter counts")
    bounds.set_defaults(handler=cmd_theory_bounds, needs_config=False)

    mcd = tsub.add_parser("mcdiarmid", parents=[common])
    mcd.add_argument("--m", type=int, default=6)
    mcd.add_argument("--samples", type=int, default=100_000)
    mcd.add_argument("--eps-grid", default="0,0.1,0.2,0.3,0.4,0.5,0.75,1.0")
    mcd.add_argument("--mu-hat", type=float, default=None)
    mcd.set_defaults(handler=cmd_theory_mcdiarmid, needs_config=False, seed_default=0)

    a1 = tsub.add_parser("assumption1", parents=[common])
    a1.set_defaults(handler=cmd_theory_assumption1, needs_config=True)

    deltas = tsub.add_parser("deltas", parents=[common])
    deltas.add_argument("--pair-id")
    deltas.add_argument("--top", type=int, default=10)
    deltas.set_defaults(handler=cmd_theory_deltas, needs_config=True)

    exp = sub.add_parser("experiment", parents=[common])
    exp.add_argument("--plan", type=Path, required=True)
    exp.set_defaults(handler=cmd_experiment, needs_config=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "seed", None) is None and hasattr(args, "seed_default"):
            args.seed = args.seed_default
        config = None
        if args.needs_config:
            if args.config is None:
                raise _UsageError(f"{args.command} requires --config")
            config = load_config(args.config).but(seed=args.seed, out_dir=args.out)
        return args.handler(args, config)
    except (_UsageError, ConfigError, ValueError) as bad:
        print(f"error: {bad}", file=sys.stderr)
        return 1
    except (RiskAdaptError, OSError) as failed:
        print(f"error: {failed}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
