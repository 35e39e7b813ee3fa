"""Balanced accuracy, exact one-sided Wilcoxon signed-rank test and the
results table.

The Wilcoxon p-value is exact: conditional on the observed |difference|
ranks (average ranks on ties, zero differences dropped), the null assigns
each sign pattern probability 2^-n, and the distribution of the positive
rank sum is accumulated over all 2^n patterns via subset-sum counting.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "ConfusionMatrix",
    "MetricsRecord",
    "ComparisonResult",
    "balanced_accuracy",
    "confusion_matrix",
    "wilcoxon_one_sided",
    "aggregate",
    "compare_to_reference",
    "render_table",
    "render_csv",
]


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) ints, rows true class, cols predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def recalls(self) -> np.ndarray:
        """Per-class recall; NaN for classes with no true samples."""
        support = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.counts) / support, np.nan)


def confusion_matrix(y_true, y_pred, num_classes: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("empty input")
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def balanced_accuracy(y_true, y_pred, num_classes: int) -> float:
    """Mean per-class recall over the classes present in ``y_true``;
    absent classes are excluded with a warning."""
    cm = confusion_matrix(y_true, y_pred, num_classes)
    recalls = cm.recalls()
    present = ~np.isnan(recalls)
    if not present.all():
        missing = [i for i in range(num_classes) if not present[i]]
        warnings.warn(f"classes {missing} absent from y_true; excluded from balanced accuracy")
    return float(np.mean(recalls[present]))


@dataclass
class ComparisonResult:
    statistic: float  # positive rank sum W+
    p_value: float
    n: int  # pairs remaining after zero differences are dropped
    zeros_dropped: int


def wilcoxon_one_sided(x, y, alternative: str = "greater") -> ComparisonResult:
    """Paired signed-rank test with exact enumeration of the sign-pattern
    null. ``greater`` tests whether x - y is shifted positive."""
    if alternative not in ("greater", "less"):
        raise ValueError(f"alternative must be 'greater' or 'less', got {alternative!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"x and y must be 1-d and equal length, got {x.shape} / {y.shape}")
    d = x - y if alternative == "greater" else y - x
    nonzero = d != 0
    zeros_dropped = int((~nonzero).sum())
    d = d[nonzero]
    n = d.size
    if n == 0:
        raise ValueError("all differences zero; the signed-rank statistic is undefined")
    ranks = rankdata(np.abs(d))  # average ranks on ties
    w_plus = float(ranks[d > 0].sum())
    p = _exact_sign_rank_tail(ranks, w_plus)
    return ComparisonResult(statistic=w_plus, p_value=p, n=n, zeros_dropped=zeros_dropped)


def _exact_sign_rank_tail(ranks: np.ndarray, w_plus: float) -> float:
    """P(W+ >= w_plus) over all 2^n equiprobable sign assignments of the
    given ranks. Ranks are doubled so average ranks become integers and the
    subset-sum distribution can be counted exactly."""
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    top = 0
    for r in doubled:
        top += int(r)
        counts[r : top + 1] += counts[0 : top + 1 - r].copy()
    threshold = int(np.ceil(np.rint(2 * w_plus) - 1e-9))
    tail = counts[threshold:].sum()
    return float(tail / 2.0 ** len(doubled))


@dataclass
class MetricsRecord:
    model: str
    cv_scores: list[float]
    holdout_scores: list[float]
    cv_mean: float = field(init=False)
    cv_std: float = field(init=False)
    holdout_mean: float = field(init=False)
    holdout_std: float = field(init=False)
    gap: float = field(init=False)
    ddof: int = 1  # sample std for the +/- columns; set 0 for population

    def __post_init__(self):
        cv = np.asarray(self.cv_scores, dtype=np.float64)
        ho = np.asarray(self.holdout_scores, dtype=np.float64)
        self.cv_mean = float(cv.mean())
        self.cv_std = float(cv.std(ddof=self.ddof)) if cv.size > self.ddof else 0.0
        self.holdout_mean = float(ho.mean())
        self.holdout_std = float(ho.std(ddof=self.ddof)) if ho.size > self.ddof else 0.0
        self.gap = abs(self.cv_mean - self.holdout_mean)


def aggregate(model: str, cv_scores, holdout_scores, n_folds: int = 5, ddof: int = 1) -> MetricsRecord:
    cv = list(cv_scores)
    ho = list(holdout_scores)
    if len(cv) != n_folds or len(ho) != n_folds:
        raise ValueError(f"expected {n_folds} CV and holdout scores, got {len(cv)} / {len(ho)}")
    return MetricsRecord(model=model, cv_scores=cv, holdout_scores=ho, ddof=ddof)


def compare_to_reference(
    records: list[MetricsRecord], reference: str | None = None
) -> list[tuple[MetricsRecord, ComparisonResult | None]]:
    """Pair each record with a one-sided Wilcoxon test of the reference
    model's holdout scores against its own; the reference (best holdout
    mean when not named) gets None, rendered as N/A."""
    if not records:
        raise ValueError("no records to compare")
    if reference is None:
        reference = max(records, key=lambda r: r.holdout_mean).model
    by_name = {r.model: r for r in records}
    if reference not in by_name:
        raise ValueError(f"reference model {reference!r} not among records")
    ref = by_name[reference]
    out = []
    for rec in records:
        if rec.model == reference:
            out.append((rec, None))
        else:
            out.append((rec, wilcoxon_one_sided(ref.holdout_scores, rec.holdout_scores, "greater")))
    return out


_HEADER = ("Model", "BalAcc CV (%)", "BalAcc Holdout (%)", "Mean gap", "Wilcoxon stat", "p-value")


def _rows(compared):
    rows = []
    for rec, cmp_res in compared:
        rows.append(
            (
                rec.model,
                f"{100 * rec.cv_mean:.2f} +/- {100 * rec.cv_std:.2f}",
                f"{100 * rec.holdout_mean:.2f} +/- {100 * rec.holdout_std:.2f}",
                f"{100 * rec.gap:.2f}",
                "N/A" if cmp_res is None else f"{cmp_res.statistic:g}",
                "N/A" if cmp_res is None else f"{cmp_res.p_value:.3f}",
            )
        )
    return rows


def render_table(compared) -> str:
    """Aligned text table with one row per model."""
    rows = [_HEADER] + _rows(compared)
    widths = [max(len(r[i]) for r in rows) for i in range(len(_HEADER))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_csv(compared) -> str:
    lines = [",".join(h.replace(" ", "_") for h in _HEADER)]
    for row in _rows(compared):
        lines.append(",".join(cell.replace(" +/- ", "+/-") for cell in row))
    return "\n".join(lines) + "\n"
