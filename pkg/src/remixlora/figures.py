"""Figure rendering for the CLI report paths.

Every figure lands next to the CSV/JSON artifact it illustrates. The Agg
backend and fixed metadata keep output files byte-stable across reruns.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_METADATA = {"Software": "remixlora"}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=110, metadata=_METADATA)
    plt.close(fig)


def render_ess_histogram(samples: np.ndarray, bound_rows: list[dict], path) -> None:
    """Distribution of sampled ESS values with the tail bounds overlaid."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    n_max = max(float(np.max(samples)), 1.0)
    ax.hist(samples, bins=80, range=(1.0, max(n_max, 2.0)), color="#4878b0", edgecolor="none")
    for row in bound_rows:
        if row["bound"] <= n_max * 1.5:
            ax.axvline(row["bound"], color="#c44e52", linestyle="--", linewidth=1.2)
            ax.text(
                row["bound"], 0.98, f" delta={row['delta']:g}",
                rotation=90, va="top", ha="left", fontsize=8,
                transform=ax.get_xaxis_transform(), color="#c44e52",
            )
    ax.set_xlabel("effective support size")
    ax.set_ylabel("trials")
    ax.set_title("Routing-weight ESS at random initialization")
    fig.tight_layout()
    _save(fig, path)


def render_lemma_margins(report: dict, path) -> None:
    """Worst-case margin per verification record; failures show in red."""
    checks = report["checks"]
    names = [c["id"] for c in checks]
    margins = [c["margin"] for c in checks]
    colors = ["#55a868" if c["pass"] else "#c44e52" for c in checks]
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.bar(range(len(names)), margins, color=colors)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_yscale("symlog", linthresh=1e-12)
    ax.set_ylabel("worst-case margin")
    ax.set_title("Inequality verification margins")
    fig.tight_layout()
    _save(fig, path)


def render_variance_table(variance_rows: list[dict], path) -> None:
    """Estimator variance against the rollout count."""
    ms = [row["m"] for row in variance_rows]
    variances = [row["variance"] for row in variance_rows]
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    ax.plot(ms, variances, marker="o", color="#4878b0")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("rollouts per example (M)")
    ax.set_ylabel("router-gradient variance")
    ax.set_title("Estimator variance vs rollout count")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def render_training_curves(header: list[str], rows: list[list], path) -> None:
    """Loss and per-layer ESS over training steps, from metrics records."""
    cols = {name: i for i, name in enumerate(header)}
    steps = [row[cols["step"]] for row in rows]
    losses = [row[cols["loss"]] for row in rows]
    layer_cols = [name for name in header if name.startswith("ess_layer_")]
    fig, (ax_loss, ax_ess) = plt.subplots(2, 1, figsize=(7.0, 6.0), sharex=True)
    ax_loss.plot(steps, losses, color="#4878b0", linewidth=1.0)
    ax_loss.set_yscale("log")
    ax_loss.set_ylabel("training loss")
    ax_loss.set_title("Training curves")
    for name in layer_cols:
        ax_ess.plot(steps, [row[cols[name]] for row in rows], linewidth=1.0, label=name)
    ax_ess.set_xlabel("step")
    ax_ess.set_ylabel("batch-mean ESS")
    ax_ess.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def render_selection_histogram(histograms: list[dict[str, float]], path) -> None:
    """Per-layer activation frequency of each selected subset."""
    layers = len(histograms)
    fig, axes = plt.subplots(layers, 1, figsize=(7.0, 2.6 * layers), squeeze=False)
    for l, hist in enumerate(histograms):
        ax = axes[l][0]
        keys = sorted(hist, key=lambda key: (-hist[key], key))
        ax.bar(range(len(keys)), [hist[key] for key in keys], color="#4878b0")
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels(keys, rotation=90, fontsize=7)
        ax.set_ylabel(f"layer {l} freq")
    axes[-1][0].set_xlabel("activated subset")
    axes[0][0].set_title("Top-k subset usage at evaluation")
    fig.tight_layout()
    _save(fig, path)
