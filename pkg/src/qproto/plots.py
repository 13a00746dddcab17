"""Figure rendering for the report paths.

Every CLI command that writes a delimited report also renders a matching
figure next to it (opt out with --no-plots). Uses the Agg backend so it
works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _moving_average(x, window):
    if len(x) < window:
        return np.asarray(x, dtype=float)
    kernel = np.ones(window) / window
    return np.convolve(x, kernel, mode="valid")


def save_training_curves(log_rows, path, smooth=50):
    """Loss and episode accuracy over training episodes."""
    rows = np.asarray(log_rows, dtype=float)
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    ep, loss, acc = rows[:, 0], rows[:, 1], rows[:, 2]
    axes[0].plot(ep, loss, lw=0.4, alpha=0.4, color="tab:blue")
    axes[1].plot(ep, acc, lw=0.4, alpha=0.4, color="tab:orange")
    if len(ep) >= smooth:
        axes[0].plot(ep[smooth - 1:], _moving_average(loss, smooth),
                     lw=1.5, color="tab:blue", label=f"{smooth}-ep mean")
        axes[1].plot(ep[smooth - 1:], _moving_average(acc, smooth),
                     lw=1.5, color="tab:orange", label=f"{smooth}-ep mean")
        axes[0].legend()
        axes[1].legend()
    axes[0].set_xlabel("episode")
    axes[0].set_ylabel("loss")
    axes[1].set_xlabel("episode")
    axes[1].set_ylabel("episode accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_eval_histogram(report, path):
    """Distribution of per-episode accuracies with the mean +- ci95 band."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.hist(report.accuracies, bins=20, color="tab:blue", alpha=0.75)
    ax.axvline(report.mean, color="tab:red", lw=1.5,
               label=f"mean {report.mean:.3f} ± {report.ci95:.3f}")
    ax.axvspan(report.mean - report.ci95, report.mean + report.ci95,
               color="tab:red", alpha=0.15)
    ax.set_xlabel("episode accuracy")
    ax.set_ylabel("episodes")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_grid_figure(rows, grid_kind, path):
    """Ablation results: line plot for the xi sweep, bars otherwise."""
    ok = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    if grid_kind == "xi" and ok:
        xs = [r["xi"] for r in ok]
        ys = [r["mean"] for r in ok]
        es = [r["ci95"] for r in ok]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3)
        ax.set_xlabel("generation coefficient")
        ax.set_ylabel("mean accuracy")
        ax.set_xticks(xs)
    else:
        labels = []
        for r in rows:
            if "similarity" in r and grid_kind == "similarity":
                labels.append(r["similarity"])
            else:
                labels.append("A{}H{}P{}".format(
                    int(r.get("attention", True)), int(r.get("hierarchy", True)),
                    int(r.get("protogen", True))))
        ys = [r["mean"] if r.get("status") == "ok" else 0.0 for r in rows]
        es = [r["ci95"] if r.get("status") == "ok" else 0.0 for r in rows]
        ax.bar(range(len(rows)), ys, yerr=es, capsize=3, color="tab:blue", alpha=0.8)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("mean accuracy")
    ax.set_ylim(bottom=0.0)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
