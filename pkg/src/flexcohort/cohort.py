"""Fixed-window (primary) and flexible-window (secondary) cohort construction."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .codemap import CodeMap
from .errors import SchemaError, ValidationError
from .events import NEVER, EventRecord, EventStore, from_day, parse_date, to_day

DEFAULT_THRESHOLDS = (0, 30, 60, 90, 180, 360, 720)
COHORT_HEADER = ["person_id", "label", "obs_start", "obs_end", "history_days", "exclusion_reason"]


class Label(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class ExclusionReason(str, Enum):
    NO_EVENTS_IN_WINDOW = "no_events_in_window"
    OUTCOME_BEFORE_INDEX = "outcome_before_index"
    INSUFFICIENT_HISTORY = "insufficient_history"
    NO_EVENTS_AT_ALL = "no_events_at_all"


@dataclass(frozen=True)
class FixedWindowSpec:
    obs_start: date
    index_date: date
    pred_end: date
    outcome_category: str

    def __post_init__(self):
        if not self.obs_start < self.index_date < self.pred_end:
            raise ValidationError("fixed window needs obs_start < index_date < pred_end")

    @property
    def mode(self) -> str:
        return "fixed"


@dataclass(frozen=True)
class FlexibleWindowSpec:
    min_history_days: int
    outcome_category: str

    def __post_init__(self):
        if int(self.min_history_days) != self.min_history_days or self.min_history_days < 0:
            raise ValidationError("min_history_days must be a non-negative integer")

    @property
    def mode(self) -> str:
        return "flexible"


@dataclass(frozen=True)
class CohortMember:
    person_id: str
    label: Label
    obs_start: date
    obs_end: date
    history_days: int

    @property
    def positive(self) -> bool:
        return self.label is Label.POSITIVE


@dataclass
class Cohort:
    spec: FixedWindowSpec | FlexibleWindowSpec | None
    members: list[CohortMember]
    exclusion_log: dict[str, ExclusionReason]
    store_fingerprint: str | None = None
    _arrays: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def n_positive(self) -> int:
        return sum(m.positive for m in self.members)

    @property
    def person_ids(self) -> list[str]:
        return [m.person_id for m in self.members]

    def labels(self) -> np.ndarray:
        return np.array([m.positive for m in self.members], dtype=np.int8)

    def exclusion_counts(self) -> dict[str, int]:
        out = {r.value: 0 for r in ExclusionReason}
        for r in self.exclusion_log.values():
            out[r.value] += 1
        return out

    def window_arrays(self, store: EventStore) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(store person index, obs_start day, obs_end day, label) per member."""
        key = store.fingerprint
        if key not in self._arrays:
            idx = np.array([store.index_of(m.person_id) for m in self.members], dtype=np.int64)
            start = np.array([to_day(m.obs_start) for m in self.members], dtype=np.int64)
            end = np.array([to_day(m.obs_end) for m in self.members], dtype=np.int64)
            self._arrays[key] = (idx, start, end, self.labels())
        return self._arrays[key]

    def to_csv(self) -> str:
        rows = {m.person_id: f"{m.person_id},{m.label.value},{m.obs_start.isoformat()},"
                             f"{m.obs_end.isoformat()},{m.history_days}," for m in self.members}
        for pid, reason in self.exclusion_log.items():
            rows[pid] = f"{pid},,,,,{reason.value}"
        buf = io.StringIO()
        buf.write(",".join(COHORT_HEADER) + "\n")
        for pid in sorted(rows):
            buf.write(rows[pid] + "\n")
        return buf.getvalue()


def read_cohort_csv(path: str | Path) -> Cohort:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split(",") != COHORT_HEADER:
        raise SchemaError(f"cohort header must be {','.join(COHORT_HEADER)}", 1)
    members, excluded = [], {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise SchemaError("expected 6 fields", n)
        pid, label, s, e, h, reason = parts
        try:
            if label:
                members.append(CohortMember(pid, Label(label), parse_date(s), parse_date(e), int(h)))
            else:
                excluded[pid] = ExclusionReason(reason)
        except ValueError as exc:
            raise SchemaError(str(exc), n) from None
    members.sort(key=lambda m: m.person_id)
    return Cohort(None, members, excluded)


def _outcome_days(store: EventStore, codemap: CodeMap, outcome: str) -> np.ndarray:
    codemap.outcome_rule(outcome)  # raises UnknownCategory
    return store.first_satisfied_days(codemap, outcome)


def _assemble(store: EventStore, spec, keep: np.ndarray, positive: np.ndarray, start: np.ndarray,
              end: np.ndarray, reasons: dict[int, ExclusionReason]) -> Cohort:
    members = [
        CohortMember(store.person_ids[i], Label.POSITIVE if positive[i] else Label.NEGATIVE,
                     from_day(start[i]), from_day(end[i]), int(end[i] - start[i]))
        for i in np.flatnonzero(keep)
    ]
    log = {store.person_ids[i]: r for i, r in sorted(reasons.items())}
    return Cohort(spec, members, log, store.fingerprint)


def build_fixed(store: EventStore, codemap: CodeMap, spec: FixedWindowSpec) -> Cohort:
    """Primary cohort: one global observation window and prediction window.

    An outcome on the index date itself counts as an outcome before the
    prediction window and excludes the person.
    """
    outcome = _outcome_days(store, codemap, spec.outcome_category)
    lo, idx, hi = to_day(spec.obs_start), to_day(spec.index_date), to_day(spec.pred_end)
    in_window = (store.day >= lo) & (store.day <= idx)
    n_in_window = np.bincount(store.person[in_window], minlength=store.n_persons)
    has_any = store.event_counts > 0

    reasons: dict[int, ExclusionReason] = {}
    no_any = ~has_any
    early = has_any & (outcome <= idx)
    empty = has_any & ~early & (n_in_window == 0)
    for mask, reason in ((no_any, ExclusionReason.NO_EVENTS_AT_ALL),
                         (early, ExclusionReason.OUTCOME_BEFORE_INDEX),
                         (empty, ExclusionReason.NO_EVENTS_IN_WINDOW)):
        for i in np.flatnonzero(mask):
            reasons[int(i)] = reason
    keep = has_any & ~early & ~empty
    positive = (outcome > idx) & (outcome <= hi)
    start = np.maximum(store.first_days(), lo)
    end = np.full(store.n_persons, idx, dtype=np.int64)
    return _assemble(store, spec, keep, positive, start, end, reasons)


def _flexible_base(store: EventStore, codemap: CodeMap, outcome_category: str):
    outcome = _outcome_days(store, codemap, outcome_category)
    first, last = store.first_days(), store.last_days()
    has_any = store.event_counts > 0
    positive = has_any & (outcome != NEVER)
    end = np.where(positive, outcome, last)
    history = np.where(has_any, end - first, -1)
    return has_any, positive, first, end, history


def build_flexible(store: EventStore, codemap: CodeMap, spec: FlexibleWindowSpec) -> Cohort:
    """Secondary cohort: each person observed from first record to first outcome.

    Negatives are observed up to their last record. Persons whose observed span
    is shorter than ``min_history_days`` are excluded.
    """
    has_any, positive, first, end, history = _flexible_base(store, codemap, spec.outcome_category)
    short = has_any & (history < spec.min_history_days)
    reasons = {int(i): ExclusionReason.NO_EVENTS_AT_ALL for i in np.flatnonzero(~has_any)}
    reasons.update({int(i): ExclusionReason.INSUFFICIENT_HISTORY for i in np.flatnonzero(short)})
    keep = has_any & ~short
    return _assemble(store, spec, keep, positive, first, end, reasons)


@dataclass(frozen=True)
class SweepRow:
    threshold: int
    n_members: int
    n_positive: int


def sweep_thresholds(store: EventStore, codemap: CodeMap, outcome: str,
                     thresholds: Sequence[int] = DEFAULT_THRESHOLDS) -> list[SweepRow]:
    if not thresholds:
        raise ValidationError("thresholds must be non-empty")
    has_any, positive, _, _, history = _flexible_base(store, codemap, outcome)
    rows = []
    for t in thresholds:
        FlexibleWindowSpec(t, outcome)  # validates t
        keep = has_any & (history >= t)
        rows.append(SweepRow(int(t), int(keep.sum()), int((keep & positive).sum())))
    return rows


def window_events(store: EventStore, member: CohortMember) -> list[EventRecord]:
    """Events of ``member`` inside its observation window; nothing after ``obs_end`` is reachable."""
    s = store.event_slice(member.person_id)
    lo, hi = to_day(member.obs_start), to_day(member.obs_end)
    return [store.record(j) for j in range(s.start, s.stop) if lo <= store.day[j] <= hi]
