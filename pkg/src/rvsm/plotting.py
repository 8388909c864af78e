"""Matplotlib figures written next to the textual reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "rvsm",
}


def _rgb(color):
    return tuple(v / 255.0 for v in color)


def roc_curve(scores, truth):
    """False/true positive rates over all distinct score thresholds."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(truth, dtype=bool)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / max(y.sum(), 1)]
    fpr = np.r_[0.0, fps / max((~y).sum(), 1)]
    return fpr, tpr


def plot_eval_report(report, posterior, truth, dictionary, prefix):
    """Bar chart of per-class metrics and per-class ROC curves.

    Returns the list of written paths (``<prefix>_metrics.png``,
    ``<prefix>_roc.png``).
    """
    colors = {c.id: _rgb(c.color) for c in dictionary.classes}
    paths = []
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(report.per_class) + 2), 3))
        x = np.arange(len(report.per_class))
        aucs = [np.nan if c.auc is None else c.auc for c in report.per_class]
        sens = [np.nan if c.mean_sensitivity is None else c.mean_sensitivity for c in report.per_class]
        ax.bar(x - 0.2, aucs, 0.4, label="AUC", color="0.35")
        ax.bar(x + 0.2, sens, 0.4, label="mean sensitivity", color="0.7")
        ax.set_xticks(x, [c.name for c in report.per_class], rotation=30, ha="right")
        ax.set_ylim(0, 1.05)
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        paths.append(f"{prefix}_metrics.png")
        fig.savefig(paths[-1], metadata={"Software": None})
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        for k, cid in enumerate(posterior.class_ids):
            y = truth.labels == cid
            if y.all() or not y.any():
                continue
            fpr, tpr = roc_curve(posterior.class_probs[:, k], y)
            name = next(c.name for c in report.per_class if c.class_id == cid)
            ax.plot(fpr, tpr, color=colors.get(cid, "k"), lw=1.2, label=name)
        ax.plot([0, 1], [0, 1], ls=":", color="0.6", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(frameon=False)
        fig.tight_layout()
        paths.append(f"{prefix}_roc.png")
        fig.savefig(paths[-1], metadata={"Software": None})
        plt.close(fig)
    return paths


def plot_posterior(posterior, dictionary, path, max_points=20000):
    """Top-down (x-y) scatter of hard labels."""
    colors = {c.id: _rgb(c.color) for c in dictionary.classes}
    pts = posterior.points
    labels = posterior.hard_labels
    if len(pts) > max_points:
        idx = np.linspace(0, len(pts) - 1, max_points).astype(int)
        pts, labels = pts[idx], labels[idx]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 4))
        size = float(np.clip(4000 / max(len(pts), 1), 1, 40))
        ax.scatter(pts[:, 0], pts[:, 1], s=size, c=[colors[int(l)] for l in labels], linewidths=0)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def plot_bench(sizes, per_point_seconds, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 3))
        ax.plot(sizes, np.asarray(per_point_seconds) * 1e6, "o-", color="0.2")
        ax.set_xscale("log")
        ax.set_xlabel("number of queries")
        ax.set_ylabel("time per query [us]")
        ax.set_ylim(bottom=0)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
