"""Post-hoc figures rendered to PNG files (no display needed)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _series(records, population: str, attr: str) -> dict:
    out = defaultdict(lambda: ([], []))
    for rec in records:
        for row in rec.species:
            if row.population == population:
                xs, ys = out[row.species_id]
                xs.append(rec.generation)
                ys.append(getattr(row, attr))
    return dict(out)


def _panel(ax, series, title):
    for sid, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, marker="o", markersize=3, label=f"species {sid}")
    ax.set_title(title)
    ax.set_xlabel("generation")
    ax.grid(alpha=0.3)


def species_figures(records, out_dir) -> list[Path]:
    """Per-species mean features and scores for both populations."""
    out_dir = Path(out_dir)
    written = []
    for population in ("module", "blueprint"):
        fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
        for ax, (attr, title) in zip(axes, [("mean_size", "size"), ("mean_nodes", "nodes"),
                                            ("mean_edges", "connections")]):
            _panel(ax, _series(records, population, attr), f"{population} species: {title}")
        axes[0].legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{population}_species_features.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

        fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
        _panel(axes[0], _series(records, population, "mean_accuracy"), f"{population} species: accuracy")
        _panel(axes[1], _series(records, population, "mean_loss"), f"{population} species: loss")
        axes[0].legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{population}_species_scores.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def best_so_far_figure(scores, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(range(len(scores)), [s.accuracy for s in scores], marker="o", markersize=3)
    ax.set_xlabel("generation")
    ax.set_ylabel("validation accuracy")
    ax.set_title("best so far")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def history_figure(history, path) -> Path:
    epochs = range(1, len(history) + 1)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].plot(epochs, history.accuracy, label="train")
    axes[1].plot(epochs, history.loss, label="train")
    if history.val_accuracy:
        axes[0].plot(epochs, history.val_accuracy, label="test")
        axes[1].plot(epochs, history.val_loss, label="test")
    for ax, name in zip(axes, ("accuracy", "loss")):
        ax.set_xlabel("epoch")
        ax.set_title(name)
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
