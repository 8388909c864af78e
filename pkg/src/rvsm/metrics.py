"""Per-class AUC and threshold-averaged sensitivity of a semantic map."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, UndefinedMetricError

DEFAULT_GRID = 99


def auc(scores, truth) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Tied scores share the mean of their ranks, so a tie between a positive
    and a negative counts one half.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(truth).ravel().astype(bool)
    if s.shape != y.shape:
        raise AlignmentError("scores and truth differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative examples")
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    # average 1-based ranks over runs of equal scores
    starts = np.r_[0, np.flatnonzero(np.diff(s_sorted)) + 1]
    ends = np.r_[starts[1:], len(s)]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(run_rank, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def threshold_grid(grid_points: int = DEFAULT_GRID) -> np.ndarray:
    """Interior thresholds ``i / (G + 1)`` for ``i = 1..G``."""
    return np.arange(1, grid_points + 1) / (grid_points + 1)


def mean_sensitivity(scores, truth, grid_points: int = DEFAULT_GRID) -> float:
    """Recall ``TP / (TP + FN)`` averaged over a uniform threshold grid in (0, 1).

    A point is predicted positive when its score is strictly above the
    threshold.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(truth).ravel().astype(bool)
    if s.shape != y.shape:
        raise AlignmentError("scores and truth differ in length")
    pos = np.sort(s[y])
    if len(pos) == 0:
        raise UndefinedMetricError("sensitivity needs at least one positive example")
    taus = threshold_grid(grid_points)
    tp = len(pos) - np.searchsorted(pos, taus, side="right")
    # one division of exact integer sums: correctly rounded
    return int(tp.sum()) / (len(taus) * len(pos))


@dataclass
class ClassMetrics:
    class_id: int
    name: str
    support: int
    auc: float = None
    mean_sensitivity: float = None
    note: str = ""


@dataclass
class EvalReport:
    per_class: list
    averages: dict
    threshold_grid: str
    flagged: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": [vars(c) for c in self.per_class],
            "averages": self.averages,
            "threshold_grid": self.threshold_grid,
            "flagged": self.flagged,
        }

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def table(self) -> str:
        """Plain-text table: one column per class plus the average."""
        cols = [c.name for c in self.per_class] + ["Average"]

        def fmt(v):
            return "-" if v is None else f"{100 * v:.1f}"

        rows = [
            ["AUC"] + [fmt(c.auc) for c in self.per_class] + [fmt(self.averages["auc"])],
            ["Sensitivity"] + [fmt(c.mean_sensitivity) for c in self.per_class]
            + [fmt(self.averages["sensitivity"])],
            ["Support"] + [str(c.support) for c in self.per_class] + [str(sum(c.support for c in self.per_class))],
        ]
        header = ["Metric"] + cols
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = ["  ".join(h.rjust(w) if i else h.ljust(w) for i, (h, w) in enumerate(zip(header, widths)))]
        lines.append("  ".join("-" * w for w in widths))
        for r in rows:
            lines.append("  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(r, widths))))
        return "\n".join(lines) + "\n"


def evaluate_map(posterior, truth, grid_points: int = DEFAULT_GRID, dictionary=None) -> EvalReport:
    """Score each class column of ``posterior`` against one-vs-rest truth.

    Classes whose metrics are undefined (no positives, or no negatives for
    AUC) are reported but left out of the averages.
    """
    if len(posterior.points) != len(truth.labels):
        raise AlignmentError(
            f"posterior has {len(posterior.points)} points but truth has {len(truth.labels)}")
    names = {c.id: c.name for c in dictionary.classes} if dictionary is not None else {}
    per_class, flagged = [], []
    for k, cid in enumerate(posterior.class_ids):
        y = truth.labels == cid
        col = posterior.class_probs[:, k]
        cm = ClassMetrics(int(cid), names.get(cid, str(cid)), int(y.sum()))
        try:
            cm.auc = auc(col, y)
        except UndefinedMetricError as exc:
            cm.note = str(exc)
        try:
            cm.mean_sensitivity = mean_sensitivity(col, y, grid_points)
        except UndefinedMetricError as exc:
            cm.note = str(exc)
        if cm.auc is None or cm.mean_sensitivity is None:
            flagged.append(int(cid))
        per_class.append(cm)
    aucs = [c.auc for c in per_class if c.support > 0 and c.auc is not None]
    sens = [c.mean_sensitivity for c in per_class if c.support > 0 and c.mean_sensitivity is not None]
    averages = {
        "auc": float(np.mean(aucs)) if aucs else None,
        "sensitivity": float(np.mean(sens)) if sens else None,
    }
    grid = f"{grid_points} interior thresholds i/{grid_points + 1}, positive iff score > threshold"
    return EvalReport(per_class, averages, grid, flagged)
