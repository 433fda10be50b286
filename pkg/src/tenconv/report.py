"""Figure rendering for the report paths: loss curves next to report.csv,
robustness curves next to robustness.csv."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .adversarial import RobustnessCurve
from .training import ExperimentReport


def render_loss_curves(report: ExperimentReport, path) -> None:
    epochs = [r.epoch for r in report.epochs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r.train_loss for r in report.epochs], marker="o", label="train loss")
    ax.plot(epochs, [r.val_loss for r in report.epochs], marker="s", label="val loss")
    ax.axvline(report.best_epoch, color="gray", linestyle=":", label=f"best epoch {report.best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy loss")
    ax.set_title(f"{report.model} ({report.param_total:,} params)")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.val_acc for r in report.epochs], color="tab:green", alpha=0.6, label="val acc")
    ax2.set_ylabel("validation accuracy")
    ax2.set_ylim(0, 1)
    handles, labels = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(handles + h2, labels + l2, loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_robustness(curves: list[RobustnessCurve], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for curve in curves:
        label = f"{curve.model} ({curve.param_count/1000:.1f}K)"
        if curve.source_model:
            label += f" [src: {curve.source_model}]"
        ax.plot(curve.epsilons, curve.accuracies, marker="o", label=label)
    ax.set_xlabel("epsilon (pixel scale)")
    ax.set_ylabel("adversarial accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
