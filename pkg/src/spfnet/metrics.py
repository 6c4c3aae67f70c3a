"""ROC AUC with midrank ties, macro/weighted aggregation, bootstrap intervals."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import PrngState


class UndefinedAUC(ValueError):
    """AUC requested for a label with no positives or no negatives."""


def _doubled_concordance(scores: np.ndarray, labels: np.ndarray) -> tuple[int, int, int]:
    """Return ``(2U, P, N)`` where U counts concordant pairs plus half the ties.

    Uses midranks: with ``r`` the 1-based midranks of all scores,
    ``U = sum(r[pos]) - P(P+1)/2``.  Doubling keeps every quantity integral.
    """
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # tie groups in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    counts = np.diff(np.r_[starts, scores.size])
    # doubled midrank of a group starting at 0-based index s with c members: 2s + c + 1
    doubled_rank_sorted = np.repeat(2 * starts + counts + 1, counts)
    doubled_ranks = np.empty_like(doubled_rank_sorted)
    doubled_ranks[order] = doubled_rank_sorted
    pos = labels == 1
    p = int(pos.sum())
    n = int(labels.size - p)
    doubled_u = int(doubled_ranks[pos].sum()) - p * (p + 1)
    return doubled_u, p, n


def concordance(scores: Sequence[float], labels: Sequence[int]) -> tuple[int, int, int]:
    """Exact integer statistic behind :func:`roc_auc`: ``(2U, positives, negatives)``."""
    s, y = _validate(scores, labels)
    return _doubled_concordance(s, y)


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y.astype(np.int64)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score+ > score-) + 0.5 P(tie), via midranks.

    Raises :class:`UndefinedAUC` when only one class is present.
    """
    s, y = _validate(scores, labels)
    doubled_u, p, n = _doubled_concordance(s, y)
    if p == 0 or n == 0:
        raise UndefinedAUC(f"AUC undefined with {p} positives and {n} negatives")
    return doubled_u / (2 * p * n)


@dataclass
class LabelAUC:
    label: str
    auc: float | None
    positives: int

    @property
    def defined(self) -> bool:
        return self.auc is not None


def per_label_auc(scores: np.ndarray, targets: np.ndarray, names: Sequence[str]) -> list[LabelAUC]:
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise ValueError(f"score matrix {scores.shape} and label matrix {targets.shape} must match (rows x labels)")
    out = []
    for j, name in enumerate(names):
        y = targets[:, j]
        try:
            auc = roc_auc(scores[:, j], y)
        except UndefinedAUC:
            auc = None
        out.append(LabelAUC(name, auc, int((y == 1).sum())))
    return out


def macro_auc(per_label: Sequence[LabelAUC]) -> float:
    defined = [r.auc for r in per_label if r.defined]
    if not defined:
        raise UndefinedAUC("no label has a defined AUC")
    return float(np.mean(defined))


def weighted_auc(per_label: Sequence[LabelAUC]) -> float:
    """Prevalence-weighted mean: weights are positive counts in the evaluated split."""
    defined = [r for r in per_label if r.defined]
    if not defined:
        raise UndefinedAUC("no label has a defined AUC")
    w = np.array([r.positives for r in defined], dtype=np.float64)
    a = np.array([r.auc for r in defined])
    return float((w * a).sum() / w.sum())


AGGREGATES = {"macro": macro_auc, "weighted": weighted_auc}


def bootstrap_ci(scores: np.ndarray, targets: np.ndarray, aggregate: str = "macro", n: int = 1000,
                 alpha: float = 0.05, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of ``aggregate`` over ``n`` example-level resamples.

    Resample ``b`` draws its row indices from the bootstrap stream
    ``(seed, b)``, so any subset of resamples can be recomputed alone.
    Labels that become single-class inside a resample are dropped from that
    resample only.
    """
    if n < 100:
        raise ValueError("bootstrap needs n >= 100 resamples")
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape[0] != targets.shape[0]:
        raise ValueError("scores and labels must have the same number of rows")
    agg = AGGREGATES[aggregate]
    names = [str(j) for j in range(scores.shape[1])]
    rows = scores.shape[0]
    values = []
    for b in range(n):
        idx = PrngState(seed, "bootstrap", b).integers(0, rows, rows)
        try:
            values.append(agg(per_label_auc(scores[idx], targets[idx], names)))
        except UndefinedAUC:
            continue
    if not values:
        raise UndefinedAUC("every bootstrap resample was undefined")
    lo, hi = np.quantile(np.array(values), [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


@dataclass
class MetricsReport:
    per_label: list[LabelAUC]
    macro_auc: float
    weighted_auc: float
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)
    n_bootstrap: int = 0
    seed: int = 0

    @property
    def undefined_labels(self) -> list[str]:
        return [r.label for r in self.per_label if not r.defined]


def evaluate(scores: np.ndarray, targets: np.ndarray, names: Sequence[str], n_bootstrap: int = 0,
             seed: int = 0) -> MetricsReport:
    per = per_label_auc(scores, targets, names)
    report = MetricsReport(per, macro_auc(per), weighted_auc(per), n_bootstrap=n_bootstrap, seed=seed)
    if n_bootstrap:
        for agg in AGGREGATES:
            report.ci[agg] = bootstrap_ci(scores, targets, agg, n_bootstrap, seed=seed)
    return report


def _fmt(x: float | None) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_report(report: MetricsReport, path: str | Path) -> None:
    """CSV ``label,auc,positives[,ci_lower,ci_upper]`` with trailing MACRO and WEIGHTED rows."""
    with_ci = bool(report.ci)
    header = ["label", "auc", "positives"] + (["ci_lower", "ci_upper"] if with_ci else [])
    total_pos = sum(r.positives for r in report.per_label)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in report.per_label:
            writer.writerow([r.label, _fmt(r.auc), r.positives] + (["", ""] if with_ci else []))
        for name, value, key in (("MACRO", report.macro_auc, "macro"), ("WEIGHTED", report.weighted_auc, "weighted")):
            row = [name, _fmt(value), total_pos]
            if with_ci:
                lo, hi = report.ci.get(key, (None, None))
                row += [_fmt(lo), _fmt(hi)]
            writer.writerow(row)
