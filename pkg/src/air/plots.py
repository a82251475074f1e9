"""Figure rendering for gate curves, loss curves, and report bars.

Everything goes through the Agg backend and strips the PNG Software
field, so re-rendering the same inputs reproduces the file byte for
byte (given one matplotlib build).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg", force=True)

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

# fixed raster settings; savefig defaults could drift with rcParams
_SAVE = {"format": "png", "dpi": 100, "metadata": {"Software": None}}


def save_gate_curves(path, steps: list[int], names: list[str],
                     magnitudes: list[list[float]]) -> None:
    """One |gate| curve per adapter type and layer over training steps."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    try:
        for col, name in enumerate(names):
            ax.plot(steps, [row[col] for row in magnitudes],
                    label=name, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("|gate|")
        ax.set_title("gate magnitudes")
        ax.legend(fontsize=6, ncol=2)
        fig.tight_layout()
        fig.savefig(path, **_SAVE)
    finally:
        plt.close(fig)


def save_loss_curve(path, history: list[float], title: str) -> None:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    try:
        ax.plot(range(1, len(history) + 1), history, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, **_SAVE)
    finally:
        plt.close(fig)


def save_metric_bars(path, rows: list[dict]) -> None:
    """Grouped bars per evaluation metric: x = mask pattern, group = model."""
    metrics = sorted({r["metric"] for r in rows})
    if not metrics:
        raise ValueError("no rows to plot")
    models = sorted({r["model"] for r in rows})
    patterns = sorted({r["pattern"] for r in rows})
    fig, axes = plt.subplots(len(metrics), 1,
                             figsize=(8, 3.0 * len(metrics)), squeeze=False)
    try:
        width = 0.8 / len(models)
        for mi, metric in enumerate(metrics):
            ax = axes[mi][0]
            for vi, model in enumerate(models):
                vals = []
                for p in patterns:
                    match = [r["value"] for r in rows
                             if r["metric"] == metric and r["model"] == model
                             and r["pattern"] == p]
                    vals.append(match[0] if match else 0.0)
                xs = [i + vi * width for i in range(len(patterns))]
                ax.bar(xs, vals, width=width, label=model)
            ax.set_xticks([i + 0.4 - width / 2 for i in range(len(patterns))])
            ax.set_xticklabels([f"pattern {p}" for p in patterns])
            ax.set_ylabel(metric)
            ax.set_ylim(0.0, 1.05)
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, **_SAVE)
    finally:
        plt.close(fig)
