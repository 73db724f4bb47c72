"""Deterministic SVG plot emission for training curves, slot-count sweeps,
and spectral comparisons.

All figures are written with a fixed hash salt and no embedded date so that
regenerating a plot from the same CSV produces a byte-identical file.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("svg")
matplotlib.rcParams["svg.hashsalt"] = "slotgcd"

import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def line_plot(path: str | Path, xs, ys, xlabel: str, ylabel: str,
              title: str = "", label: str | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(list(xs), list(ys), marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if label:
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def curve_plot(path: str | Path, values, name: str) -> Path:
    return line_plot(path, range(len(values)), values, "epoch", name)


def sweep_plot(path: str | Path, rows: list[dict]) -> Path:
    """Accuracy-vs-slot-count curve from ``sweep_slot_counts`` rows."""
    rows = sorted(rows, key=lambda r: r["k"])
    ks = [r["k"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for col in ("acc_all", "acc_known", "acc_novel"):
        ax.plot(ks, [r[col] for r in rows], marker="o", label=col)
    ax.set_xlabel("slot count K")
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def entropy_bars(path: str | Path, labels: list[str], entropies: list[float],
                 ranks: list[int]) -> Path:
    """Paired bars: spectral entropy and rank99 per model variant."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 3.2))
    xs = range(len(labels))
    ax1.bar(xs, entropies, color="tab:blue")
    ax1.set_xticks(list(xs), labels, rotation=20)
    ax1.set_ylabel("spectral entropy")
    ax2.bar(xs, ranks, color="tab:orange")
    ax2.set_xticks(list(xs), labels, rotation=20)
    ax2.set_ylabel("rank99")
    fig.tight_layout()
    return _save(fig, path)
