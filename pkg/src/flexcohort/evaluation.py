"""ROC / AUC, Youden-optimal cut-offs and thresholded metrics, plus report tables."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._format import render
from .errors import SingleClass, ValidationError

SWEEP_COLUMNS = ["f1", "AUC", "Sen", "Prec", "MRLT", "Num-Out", "Num-ind"]
COMPARISON_COLUMNS = ["model", "f1", "AUC", "Sen", "Prec", "Spec", "threshold", "Num-Out", "Num-ind", "error"]


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # +inf first, then distinct scores descending


@dataclass(frozen=True)
class MetricsRow:
    f1: float
    auc: float
    sensitivity: float
    precision: float
    specificity: float
    threshold_used: float
    n_outcomes: int
    n_individuals: int


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be 1-D and equally long")
    if not np.isfinite(s).all():
        raise ValidationError("scores must be finite")
    if y.all() or not y.any():
        raise SingleClass("both classes must be present")
    return s, y


def _cumulative(s: np.ndarray, y: np.ndarray):
    """Distinct scores descending with TP / FP counts for the rule ``score >= t``."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def roc_and_auc(scores, labels) -> tuple[RocCurve, float]:
    """ROC with tied scores grouped into one step; AUC by the trapezoid rule."""
    s, y = _validate(scores, labels)
    thr, tp, fp = _cumulative(s, y)
    P, N = int(y.sum()), int((~y).sum())
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / N]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, np.r_[np.inf, thr]), auc


def youden_threshold(scores, labels) -> tuple[float, float]:
    """Observed score maximizing J = TPR - FPR under ``score >= t``; smallest t on ties."""
    s, y = _validate(scores, labels)
    thr, tp, fp = _cumulative(s, y)
    P, N = int(y.sum()), int((~y).sum())
    # J * P * N is an exact integer, so ties are detected without rounding error
    scaled = tp.astype(np.int64) * N - fp.astype(np.int64) * P
    # thresholds run descending, so the last maximal entry is the smallest score
    k = int(np.flatnonzero(scaled == scaled.max())[-1])
    return float(thr[k]), int(scaled[k]) / (P * N)


def confusion(scores, labels, threshold: float) -> tuple[int, int, int, int]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    return tp, fp, fn, tn


def rates(tp: int, fp: int, fn: int, tn: int) -> tuple[float, float, float, float]:
    """(sensitivity, precision, specificity, F1); undefined ratios become 0."""
    sens = tp / (tp + fn) if tp + fn else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    f1 = 2 * sens * prec / (sens + prec) if sens + prec else 0.0
    return sens, prec, spec, f1


def metrics_at(scores, labels, threshold: float, n_outcomes: int | None = None,
               n_individuals: int | None = None) -> MetricsRow:
    s, y = _validate(scores, labels)
    sens, prec, spec, f1 = rates(*confusion(s, y, threshold))
    _, auc = roc_and_auc(s, y)
    return MetricsRow(f1, auc, sens, prec, spec, float(threshold),
                      int(y.sum()) if n_outcomes is None else n_outcomes,
                      len(y) if n_individuals is None else n_individuals)


@dataclass(frozen=True)
class SweepEntry:
    threshold_days: int
    metrics: MetricsRow | None
    n_outcomes: int
    n_individuals: int
    error: str | None = None


def sort_sweep(entries: Sequence[SweepEntry]) -> list[SweepEntry]:
    """AUC descending, then f1 descending; equal rows keep input order. Failed rows go last."""
    if not entries:
        raise ValidationError("sweep report needs at least one row")
    key = lambda e: (0, -e.metrics.auc, -e.metrics.f1) if e.metrics else (1, 0.0, 0.0)
    return sorted(entries, key=key)


def sweep_report(entries: Sequence[SweepEntry], fmt: str = "csv") -> str:
    rows = []
    for e in sort_sweep(entries):
        m = e.metrics
        vals = [m.f1, m.auc, m.sensitivity, m.precision] if m else ["", "", "", ""]
        rows.append(vals + [e.threshold_days, e.n_outcomes, e.n_individuals])
    cols = list(SWEEP_COLUMNS)
    if any(e.error for e in entries):
        cols.append("error")
        rows = [r + [_clean(e.error)] for r, e in zip(rows, sort_sweep(entries))]
    return render(cols, rows, fmt)


def _clean(msg: str | None) -> str:
    return "" if not msg else msg.replace(",", ";").replace("\n", " ")


@dataclass(frozen=True)
class ComparisonEntry:
    model: str
    metrics: MetricsRow | None
    n_outcomes: int
    n_individuals: int
    error: str | None = None


def comparison_report(entries: Sequence[ComparisonEntry], fmt: str = "csv") -> str:
    """One row per preset in declaration order; failed presets carry their error."""
    if not entries:
        raise ValidationError("comparison report needs at least one row")
    rows = []
    for e in entries:
        m = e.metrics
        vals = ([m.f1, m.auc, m.sensitivity, m.precision, m.specificity, m.threshold_used] if m
                else ["", "", "", "", "", ""])
        rows.append([e.model] + vals + [e.n_outcomes, e.n_individuals, _clean(e.error)])
    return render(COMPARISON_COLUMNS, rows, fmt)
