"""Figures for benchmark reports (written to files, never shown)."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from knowflow.bench import SuiteReport  # noqa: E402

QUALITY_METRICS = ("tsr", "fpa", "inst_acc", "tool_acc", "arg_acc", "overall")
EFFICIENCY_METRICS = ("ntc", "ni")


def _labels(reports: Sequence[SuiteReport]) -> list[str]:
    multi = len({r.epoch for r in reports}) > 1
    return [f"{r.config}#e{r.epoch}" if multi else r.config for r in reports]


def _grouped_bars(ax, reports, metrics, ylabel):
    labels = _labels(reports)
    width = 0.8 / max(1, len(reports))
    for i, (label, report) in enumerate(zip(labels, reports)):
        agg = report.overall
        xs = [m + i * width for m in range(len(metrics))]
        ax.bar(xs, [getattr(agg, k) for k in metrics], width, label=label)
    ax.set_xticks([m + width * (len(reports) - 1) / 2 for m in range(len(metrics))])
    ax.set_xticklabels([k.upper() for k in metrics])
    ax.set_ylabel(ylabel)
    ax.legend(fontsize="small")


def plot_metrics(reports: Sequence[SuiteReport], path: str) -> str:
    fig, ax = plt.subplots(figsize=(8, 4))
    _grouped_bars(ax, reports, QUALITY_METRICS, "percent")
    ax.set_ylim(0, 105)
    ax.set_title("Task and step metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_efficiency(reports: Sequence[SuiteReport], path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    _grouped_bars(ax, reports, EFFICIENCY_METRICS, "mean per task")
    ax.set_title("Tool calls and user interactions")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_learning_curve(reports: Sequence[SuiteReport], path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    for config in sorted({r.config for r in reports}):
        series = sorted((r for r in reports if r.config == config), key=lambda r: r.epoch)
        ax.plot([r.epoch for r in series], [r.totals["planner_calls"] for r in series], marker="o", label=config)
    ax.set_xlabel("epoch")
    ax.set_ylabel("planner calls")
    ax.set_title("Planner calls per epoch")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_figures(reports: Sequence[SuiteReport], directory: str) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = [
        plot_metrics(reports, os.path.join(directory, "metrics.png")),
        plot_efficiency(reports, os.path.join(directory, "efficiency.png")),
    ]
    if len({r.epoch for r in reports}) > 1:
        paths.append(plot_learning_curve(reports, os.path.join(directory, "learning_curve.png")))
    return paths
