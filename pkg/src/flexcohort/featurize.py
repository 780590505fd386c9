"""Per-member feature rows: in-window category counts plus sex and age group."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._format import fmt_num, render
from .codemap import CodeMap, rule_first_satisfied
from .cohort import Cohort
from .errors import CohortStoreMismatch, EmptyMatrix, OutOfRange, SchemaError, UnknownCategory, UnknownPerson
from .events import EventStore

MULTIVARIABLE = "multivariable"
DICHOTOMOUS = "dichotomous"

AGE_BINS = (("18-29", 18, 29), ("30-39", 30, 39), ("40-49", 40, 49), ("50-59", 50, 59), ("60+", 60, 120))
AGE_COLUMNS = ("age_18_29", "age_30_39", "age_40_49", "age_50_59", "age_60_plus")
STATIC_COLUMNS = ("sex_male",) + AGE_COLUMNS
AGE_REFERENCE = "age_18_29"


def age_category(age_years: int) -> str:
    for label, lo, hi in AGE_BINS:
        if lo <= age_years <= hi:
            return label
    raise OutOfRange(f"age {age_years} outside [18, 120]")


@dataclass(frozen=True)
class FeatureSpec:
    categories: tuple[str, ...]
    include_static: bool = True
    mode: str = MULTIVARIABLE
    dichotomize_threshold: int = 1

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.mode not in (MULTIVARIABLE, DICHOTOMOUS):
            raise ValueError(f"unknown feature mode {self.mode!r}")
        if self.dichotomize_threshold < 1:
            raise ValueError("dichotomize_threshold must be >= 1")

    @classmethod
    def default(cls, codemap: CodeMap, **kw) -> "FeatureSpec":
        return cls(tuple(codemap.feature_categories), **kw)

    @property
    def column_names(self) -> list[str]:
        return list(self.categories) + (list(STATIC_COLUMNS) if self.include_static else [])


@dataclass
class FeatureMatrix:
    column_names: list[str]
    X: np.ndarray
    labels: np.ndarray
    row_ids: list[str]
    dynamic_columns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.X.shape != (len(self.row_ids), len(self.column_names)):
            raise ValueError("feature matrix shape does not match names")
        if len(self.labels) != len(self.row_ids):
            raise ValueError("labels length does not match rows")

    @property
    def n_rows(self) -> int:
        return len(self.row_ids)

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.column_names.index(name)]

    def drop(self, names: Sequence[str]) -> "FeatureMatrix":
        keep = [i for i, c in enumerate(self.column_names) if c not in set(names)]
        cols = [self.column_names[i] for i in keep]
        return FeatureMatrix(cols, self.X[:, keep], self.labels, self.row_ids,
                             tuple(c for c in self.dynamic_columns if c in cols))

    def dichotomize(self, threshold: int = 1) -> "FeatureMatrix":
        X = self.X.copy()
        dyn = [self.column_names.index(c) for c in self.dynamic_columns]
        X[:, dyn] = (X[:, dyn] >= threshold).astype(X.dtype)
        return FeatureMatrix(list(self.column_names), X, self.labels, self.row_ids, self.dynamic_columns)

    def to_csv(self) -> str:
        lines = ["person_id," + ",".join(self.column_names) + ",label"]
        for pid, row, y in zip(self.row_ids, self.X.tolist(), self.labels.tolist()):
            lines.append(pid + "," + ",".join(fmt_num(v) for v in row) + f",{int(y)}")
        return "\n".join(lines) + "\n"


def read_features_csv(path: str | Path) -> FeatureMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaError("empty features file", 1)
    header = lines[0].split(",")
    if len(header) < 2 or header[0] != "person_id" or header[-1] != "label":
        raise SchemaError("features header must be person_id,<columns>,label", 1)
    cols = header[1:-1]
    ids, rows, labels = [], [], []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise SchemaError(f"expected {len(header)} fields", n)
        try:
            rows.append([float(v) for v in parts[1:-1]])
            labels.append(int(parts[-1]))
        except ValueError as exc:
            raise SchemaError(str(exc), n) from None
        if labels[-1] not in (0, 1):
            raise SchemaError("label must be 0 or 1", n)
        ids.append(parts[0])
    X = np.array(rows, dtype=np.float64).reshape(len(ids), len(cols))
    dynamic = tuple(c for c in cols if c not in STATIC_COLUMNS)
    return FeatureMatrix(cols, X, np.array(labels, dtype=np.int8), ids, dynamic)


def _year_of(days: np.ndarray) -> np.ndarray:
    return days.astype("datetime64[D]").astype("datetime64[Y]").astype(np.int64) + 1970


def featurize(store: EventStore, cohort: Cohort, codemap: CodeMap, spec: FeatureSpec) -> FeatureMatrix:
    """Count each category's events inside every member's observation window.

    Windows are ``[obs_start, obs_end]`` for negatives and ``[obs_start, obs_end)``
    for positives, so the outcome day never contributes. Categories with a
    multi-claim rule count only when the rule is satisfied inside the window.
    """
    if cohort.store_fingerprint is not None and cohort.store_fingerprint != store.fingerprint:
        raise CohortStoreMismatch("cohort was built from a different event store")
    for c in spec.categories:
        if c not in codemap.names:
            raise UnknownCategory(f"unknown category {c!r}")
        if c in codemap.outcome_categories:
            raise UnknownCategory(f"{c!r} is an outcome category, not a feature")
    try:
        idx, start, end, labels = cohort.window_arrays(store)
    except UnknownPerson as exc:
        raise CohortStoreMismatch(str(exc)) from None

    m = len(idx)
    member_of = np.full(store.n_persons, -1, dtype=np.int64)
    member_of[idx] = np.arange(m)
    mem = member_of[store.person]
    ok = mem >= 0
    safe = np.where(ok, mem, 0)
    lo = start[safe] if m else np.zeros(len(mem), np.int64)
    hi = end[safe] if m else np.zeros(len(mem), np.int64)
    pos = labels[safe].astype(bool) if m else np.zeros(len(mem), bool)
    in_win = ok & (store.day >= lo) & ((store.day < hi) | (~pos & (store.day == hi)))

    X = np.zeros((m, len(spec.column_names)), dtype=np.float64)
    for j, name in enumerate(spec.categories):
        rule = codemap.rule(name)
        match, single = store.category_mask(codemap, name)
        sel = match & in_win
        counts = np.bincount(mem[sel], minlength=m)
        if rule.min_claims > 1:
            established = np.bincount(mem[single & in_win], minlength=m) > 0
            chained = sel & ~single
            ch_mem, ch_day = mem[chained], store.day[chained]
            ch_counts = np.bincount(ch_mem, minlength=m)
            ch_start = np.concatenate([[0], np.cumsum(ch_counts)])
            for r in np.flatnonzero(~established & (ch_counts >= rule.min_claims)):
                days = ch_day[ch_start[r]:ch_start[r + 1]].tolist()
                if rule_first_satisfied(days, rule) is not None:
                    established[r] = True
            counts = np.where(established, counts, 0)
        X[:, j] = counts

    if spec.include_static and m:
        k = len(spec.categories)
        X[:, k] = store.sex_male[idx]
        age = _year_of(end) - store.birth_year[idx]
        if (age < 18).any() or (age > 120).any():
            bad = int(np.flatnonzero((age < 18) | (age > 120))[0])
            raise OutOfRange(f"member {cohort.members[bad].person_id} aged {age[bad]} at obs_end")
        for b, (_, a_lo, a_hi) in enumerate(AGE_BINS):
            X[:, k + 1 + b] = (age >= a_lo) & (age <= a_hi)

    fm = FeatureMatrix(spec.column_names, X, labels.astype(np.int8), cohort.person_ids, tuple(spec.categories))
    if spec.mode == DICHOTOMOUS:
        fm = fm.dichotomize(spec.dichotomize_threshold)
    return fm


@dataclass(frozen=True)
class SummaryRow:
    column: str
    kind: str  # "binary" or "count"
    no: tuple[float, float]  # (count, percent) or (median, IQR)
    yes: tuple[float, float]


def _quartile_summary(v: np.ndarray) -> tuple[float, float]:
    if len(v) == 0:
        return (float("nan"), float("nan"))
    q1, med, q3 = np.percentile(v, [25, 50, 75])  # linear interpolation (type 7)
    return float(med), float(q3 - q1)


def describe(matrix: FeatureMatrix) -> list[SummaryRow]:
    """Descriptive summary of each column, stratified by label (No / Yes)."""
    if matrix.n_rows == 0:
        raise EmptyMatrix("cannot describe an empty feature matrix")
    y = matrix.labels.astype(bool)
    rows = []
    for j, name in enumerate(matrix.column_names):
        v = matrix.X[:, j]
        if np.isin(v, (0.0, 1.0)).all():
            strata = []
            for s in (~y, y):
                n = int(s.sum())
                c = float(v[s].sum())
                strata.append((c, 100.0 * c / n if n else float("nan")))
            rows.append(SummaryRow(name, "binary", strata[0], strata[1]))
        else:
            rows.append(SummaryRow(name, "count", _quartile_summary(v[~y]), _quartile_summary(v[y])))
    return rows


def _fmt_stratum(kind: str, stat: tuple[float, float]) -> str:
    a, b = stat
    if kind == "binary":
        pct = "n/a" if np.isnan(b) else f"{b:.1f}%"
        return f"{int(a):,} ({pct})"
    if np.isnan(a):
        return "n/a"
    return f"{fmt_num(a)} (IQR {fmt_num(b)})"


def render_summary(rows: Sequence[SummaryRow], labels: np.ndarray, fmt: str = "csv") -> str:
    n_yes = int(np.sum(labels))
    n_no = len(labels) - n_yes
    cols = ["variable", "kind", f"No (n={n_no})", f"Yes (n={n_yes})"]
    body = [[r.column, r.kind, _fmt_stratum(r.kind, r.no), _fmt_stratum(r.kind, r.yes)] for r in rows]
    if fmt == "csv":
        body = [[f'"{c}"' if "," in c else c for c in r] for r in body]
    return render(cols, body, fmt)
