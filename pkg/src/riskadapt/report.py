"""Figure rendering for experiment summaries.

Consumes the delimited tables' underlying summaries and writes PNG files
next to them; nothing here feeds back into any computation.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .harness import MISALIGNED, ROBUSTNESS, SAME_SOURCE, ExperimentResult

_COLORS = {"tradition": "#d95f02", "risk": "#1b9e77"}


def _finish(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, metadata={"Software": "riskadapt"})
    plt.close(fig)
    return path


def _sufficiency_figure(result: ExperimentResult, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for method in ("tradition", "risk"):
        rows = [s for s in result.summaries if s.method == method]
        x = [float(s.condition.split("=")[1]) for s in rows]
        mean = [s.mean_f1 for s in rows]
        std = [s.std_f1 for s in rows]
        ax.plot(x, mean, marker="o", label=method, color=_COLORS[method])
        ax.fill_between(x, [m - s for m, s in zip(mean, std)],
                        [m + s for m, s in zip(mean, std)],
                        alpha=0.2, color=_COLORS[method])
    ax.set_xlabel("fraction of training data")
    ax.set_ylabel("test F1")
    ax.set_title("Same-source sufficiency sweep")
    ax.legend()
    fig.tight_layout()
    return _finish(fig, path)


def _misaligned_figure(result: ExperimentResult, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    rows = [s for s in result.summaries if s.condition == "misaligned"]
    labels = [s.method for s in rows]
    means = [s.mean_f1 for s in rows]
    stds = [s.std_f1 for s in rows]
    ax.bar(labels, means, yerr=stds, capsize=4,
           color=[_COLORS[m] for m in labels])
    ax.set_ylabel("test F1")
    ax.set_ylim(0, 1.05)
    ax.set_title("Distribution misalignment")
    fig.tight_layout()
    return _finish(fig, path)


def _robustness_figure(result: ExperimentResult, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    sized = [s for s in result.summaries
             if s.condition.startswith("val_size=") and s.condition != "val_size=full"]
    x = [int(s.condition.split("=")[1]) for s in sized]
    ax.errorbar(x, [s.mean_f1 for s in sized], yerr=[s.std_f1 for s in sized],
                marker="o", color=_COLORS["risk"], label="risk (subsampled validation)")
    for s in result.summaries:
        if s.condition == "val_size=full":
            ax.axhline(s.mean_f1, linestyle="--", color=_COLORS[s.method],
                       label=f"{s.method} (full validation)")
    ax.set_xlabel("validation instances used for risk fitting")
    ax.set_ylabel("test F1")
    ax.set_title("Validation-size robustness")
    ax.legend()
    fig.tight_layout()
    return _finish(fig, path)


def render_figures(result: ExperimentResult, out_dir: str | Path) -> list[Path]:
    """Write the scenario's figures (PNG) into out_dir; returns the paths."""
    out_dir = Path(out_dir)
    scenario = result.plan.scenario
    if scenario == SAME_SOURCE:
        return [_sufficiency_figure(result, out_dir / "sufficiency_sweep.png")]
    if scenario == MISALIGNED:
        return [_misaligned_figure(result, out_dir / "misaligned.png")]
    if scenario == ROBUSTNESS:
        return [_robustness_figure(result, out_dir / "robustness.png")]
    return []
