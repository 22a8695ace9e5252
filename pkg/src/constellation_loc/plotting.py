"""Report figures, rendered off-screen to image files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import SCENARIO_TITLES, SCENARIOS, BenchmarkReport


def plot_success_rates(report: BenchmarkReport, path) -> None:
    """Grouped bars of mean success rate per descriptor and scenario, with std whiskers."""
    extractors = list(dict.fromkeys(r.extractor for r in report.rows))
    scenarios = [s for s in SCENARIOS if any(r.scenario == s for r in report.rows)]
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * max(1, len(extractors)), 3.6))
    width = 0.8 / max(1, len(scenarios))
    x = np.arange(len(extractors))
    for k, sc in enumerate(scenarios):
        means, stds = [], []
        for e in extractors:
            try:
                row = report.row(e, sc)
                means.append(row.eta_mean)
                stds.append(row.eta_std)
            except KeyError:
                means.append(np.nan)
                stds.append(0.0)
        ax.bar(x + (k - (len(scenarios) - 1) / 2) * width, means, width, yerr=stds, capsize=2,
               label=SCENARIO_TITLES[sc])
    ax.set_xticks(x, extractors)
    ax.set_ylim(0, 105)
    ax.set_ylabel("success rate η [%]")
    ax.legend(fontsize=8, loc="lower right")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training(metrics, path) -> None:
    """Loss and topK ratio per epoch for train and validation splits."""
    epochs = [m.epoch for m in metrics]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    a.plot(epochs, [m.train_loss for m in metrics], label="train")
    a.plot(epochs, [m.val_loss for m in metrics], label="val")
    a.set_xlabel("epoch")
    a.set_ylabel("triplet loss")
    b.plot(epochs, [m.train_topK for m in metrics], label="train")
    b.plot(epochs, [m.val_topK for m in metrics], label="val")
    b.set_xlabel("epoch")
    b.set_ylabel("topK ratio")
    b.set_ylim(0, 1.02)
    for ax in (a, b):
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
