"""Figure rendering for reports: written next to the CSV artifacts."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = [
    "plot_metric_by_subset",
    "plot_training_loss",
    "plot_ablation_trend",
    "plot_variant_comparison",
]

_METRIC_LOWER_IS_BETTER = {"mpjpe", "pa_mpjpe"}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metric_by_subset(report, metric: str, path) -> Path:
    subsets = report.subsets()
    values = [report.value(s, metric) for s in subsets]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.5 * len(subsets)), 3.6))
    ax.bar(range(len(subsets)), values, color="#4878a8")
    ax.set_xticks(range(len(subsets)))
    ax.set_xticklabels(subsets, rotation=60, ha="right", fontsize=8)
    direction = "lower is better" if metric in _METRIC_LOWER_IS_BETTER else "higher is better"
    ax.set_ylabel(f"{metric} ({direction})")
    ax.set_xlabel("modality subset")
    ax.set_title(f"{metric} across modality subsets")
    return _save(fig, path)


def plot_training_loss(history, path) -> Path:
    steps = [h.step for h in history]
    losses = [h.loss for h in history]
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    ax.plot(steps, losses, lw=0.8, color="#a85548")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.set_title("training loss")
    return _save(fig, path)


def plot_ablation_trend(labeled_reports, metric: str, path) -> Path:
    """One line per modality subset across the swept probability settings."""
    labels = [label for label, _ in labeled_reports]
    subsets = labeled_reports[0][1].subsets()
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    for subset in subsets:
        ys = [rep.value(subset, metric) for _, rep in labeled_reports]
        ax.plot(range(len(labels)), ys, marker="o", ms=3, lw=1.0, label=subset)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.set_xlabel("existence probabilities")
    ax.set_title(f"{metric} vs existence probabilities")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_variant_comparison(labeled_reports, metric: str, path) -> Path:
    """Grouped bars: one group per subset, one bar per architecture variant."""
    names = [name for name, _ in labeled_reports]
    subsets = labeled_reports[0][1].subsets()
    width = 0.8 / len(names)
    fig, ax = plt.subplots(figsize=(max(7.0, 0.7 * len(subsets)), 4.0))
    for i, (name, rep) in enumerate(labeled_reports):
        xs = [j + i * width for j in range(len(subsets))]
        ax.bar(xs, [rep.value(s, metric) for s in subsets], width=width, label=name)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(subsets))])
    ax.set_xticklabels(subsets, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} by fusion variant")
    ax.legend(fontsize=7)
    return _save(fig, path)
