"""Person and event tables, indexed into a per-person chronological store.

Events are held column-wise (numpy arrays sorted by person, then date, source,
code) with per-person offsets, so cohort and feature code can work on whole
corpora without materialising one Python object per event. Dates are whole
days, stored internally as days since 1970-01-01.

File formats
------------
``persons.csv``: optional first line ``# date_range=YYYY-MM-DD,YYYY-MM-DD``,
then header ``person_id,sex,birth_year``.

``events.csv``: header ``person_id,date,source,kind,code_system,code``.
"""

from __future__ import annotations

import hashlib
import io
import re
from dataclasses import dataclass
from datetime import date
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

from .codemap import (
    CaseRule,
    CodeMap,
    CodeSystem,
    Kind,
    NormalizedCode,
    Source,
    first_satisfied_day,
    normalize_text,
    rule_first_satisfied,
)
from .errors import BadDate, OrphanEvent, SchemaError, UnknownPerson, ValidationError

EPOCH = date(1970, 1, 1)
_EPOCH_ORD = EPOCH.toordinal()
NEVER = np.iinfo(np.int32).max  # "no such day" sentinel; compares after every real day

SOURCES = tuple(Source)
KINDS = tuple(Kind)
SYSTEMS = tuple(CodeSystem)

ALLOWED_SYSTEMS = {
    Source.DAD: {CodeSystem.ICD10},
    Source.NACRS: {CodeSystem.ICD10},
    Source.CLAIMS: {CodeSystem.ICD9, CodeSystem.PROVIDER},
    Source.PIN: {CodeSystem.DIN},
}

PERSONS_HEADER = ["person_id", "sex", "birth_year"]
EVENTS_HEADER = ["person_id", "date", "source", "kind", "code_system", "code"]
_RANGE_LINE = re.compile(r"#\s*date_range=(\d{4}-\d{2}-\d{2}),(\d{4}-\d{2}-\d{2})\s*")
_ISO = re.compile(r"\d{4}-\d{2}-\d{2}")


def to_day(d: date) -> int:
    return d.toordinal() - _EPOCH_ORD


def from_day(day: int) -> date:
    return date.fromordinal(int(day) + _EPOCH_ORD)


def parse_date(text: str) -> date:
    if not _ISO.fullmatch(text):
        raise BadDate(f"not an ISO date: {text!r}")
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise BadDate(f"not a calendar date: {text!r}") from None


@dataclass(frozen=True)
class PersonRecord:
    person_id: str
    sex: str
    birth_year: int


@dataclass(frozen=True)
class EventRecord:
    person_id: str
    date: date
    source: Source
    kind: Kind
    code_system: CodeSystem
    code: str

    @property
    def normalized(self) -> NormalizedCode:
        return NormalizedCode(self.code_system, self.code)


@dataclass
class EventTable:
    """Unsorted column-wise events; ``person`` indexes a parallel persons list."""

    person: np.ndarray
    day: np.ndarray
    source: np.ndarray
    kind: np.ndarray
    system: np.ndarray
    code: np.ndarray
    vocab: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.person)

    @classmethod
    def empty(cls) -> "EventTable":
        z = np.zeros(0, dtype=np.int32)
        return cls(z, z, z.astype(np.int8), z.astype(np.int8), z.astype(np.int8), z, ())

    @classmethod
    def from_records(cls, records: Iterable[EventRecord], person_index: dict[str, int]) -> "EventTable":
        rows = list(records)
        vocab = sorted({r.code for r in rows})
        code_ix = {c: i for i, c in enumerate(vocab)}
        for r in rows:
            if r.person_id not in person_index:
                raise OrphanEvent(r.person_id)
        return cls(
            person=np.array([person_index[r.person_id] for r in rows], dtype=np.int32),
            day=np.array([to_day(r.date) for r in rows], dtype=np.int32),
            source=np.array([SOURCES.index(Source(r.source)) for r in rows], dtype=np.int8),
            kind=np.array([KINDS.index(Kind(r.kind)) for r in rows], dtype=np.int8),
            system=np.array([SYSTEMS.index(CodeSystem(r.code_system)) for r in rows], dtype=np.int8),
            code=np.array([code_ix[r.code] for r in rows], dtype=np.int32),
            vocab=tuple(vocab),
        )


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class EventStore:
    """Validated persons plus chronologically sorted per-person event timelines."""

    def __init__(self, persons: Sequence[PersonRecord], events: EventTable,
                 date_range: tuple[date, date] | None = None):
        ids = [p.person_id for p in persons]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate person_id in persons table")
        order = sorted(range(len(persons)), key=lambda i: ids[i])
        self.person_ids: list[str] = [ids[i] for i in order]
        self.persons: dict[str, PersonRecord] = {ids[i]: persons[i] for i in order}
        self._index = {pid: i for i, pid in enumerate(self.person_ids)}
        self.sex_male = _readonly(np.array([persons[i].sex == "M" for i in order], dtype=bool))
        self.birth_year = _readonly(np.array([persons[i].birth_year for i in order], dtype=np.int32))

        # canonical vocabulary: sorted, so code index order == text order
        vocab = sorted(set(events.vocab))
        vix = {c: i for i, c in enumerate(vocab)}
        remap = np.array([vix[c] for c in events.vocab], dtype=np.int32)
        inverse_order = np.empty(len(persons), dtype=np.int32)
        inverse_order[np.array(order, dtype=np.int64)] = np.arange(len(persons), dtype=np.int32)
        person = inverse_order[events.person] if len(events) else events.person.astype(np.int32)
        code = remap[events.code] if len(events) else events.code.astype(np.int32)
        # full key so identical multisets of rows give identical arrays
        sort = np.lexsort((events.kind, events.system, code, events.source, events.day, person))
        self.vocab: tuple[str, ...] = tuple(vocab)
        self.person = _readonly(person[sort].astype(np.int32))
        self.day = _readonly(events.day[sort].astype(np.int32))
        self.source = _readonly(events.source[sort].astype(np.int8))
        self.kind = _readonly(events.kind[sort].astype(np.int8))
        self.system = _readonly(events.system[sort].astype(np.int8))
        self.code = _readonly(code[sort].astype(np.int32))
        counts = np.bincount(self.person, minlength=len(persons))
        self.offsets = _readonly(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))

        if date_range is None and len(self.day):
            date_range = (from_day(self.day.min()), from_day(self.day.max()))
        if date_range is not None:
            lo, hi = date_range
            if lo > hi:
                raise ValidationError("date_range start after end")
            if len(self.day) and (self.day.min() < to_day(lo) or self.day.max() > to_day(hi)):
                raise BadDate(f"event dated outside the declared range {lo}..{hi}")
        self.date_range = date_range
        self._mask_cache: dict = {}

    # -- basic access -------------------------------------------------------
    @property
    def n_persons(self) -> int:
        return len(self.person_ids)

    @property
    def n_events(self) -> int:
        return len(self.day)

    def index_of(self, person_id: str) -> int:
        try:
            return self._index[person_id]
        except KeyError:
            raise UnknownPerson(f"unknown person {person_id!r}") from None

    def __contains__(self, person_id: str) -> bool:
        return person_id in self._index

    def event_slice(self, person_id: str) -> slice:
        i = self.index_of(person_id)
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def record(self, j: int) -> EventRecord:
        return EventRecord(
            self.person_ids[self.person[j]],
            from_day(self.day[j]),
            SOURCES[self.source[j]],
            KINDS[self.kind[j]],
            SYSTEMS[self.system[j]],
            self.vocab[self.code[j]],
        )

    def timeline(self, person_id: str) -> list[EventRecord]:
        s = self.event_slice(person_id)
        return [self.record(j) for j in range(s.start, s.stop)]

    def iter_records(self) -> Iterator[EventRecord]:
        for j in range(self.n_events):
            yield self.record(j)

    @property
    def event_counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def first_days(self) -> np.ndarray:
        """Per-person first event day (``NEVER`` for empty timelines)."""
        out = np.full(self.n_persons, NEVER, dtype=np.int64)
        has = self.event_counts > 0
        out[has] = self.day[self.offsets[:-1][has]]
        return out

    def last_days(self) -> np.ndarray:
        out = np.full(self.n_persons, NEVER, dtype=np.int64)
        has = self.event_counts > 0
        out[has] = self.day[self.offsets[1:][has] - 1]
        return out

    # -- category matching --------------------------------------------------
    def category_mask(self, codemap: CodeMap, category: str) -> tuple[np.ndarray, np.ndarray]:
        """Per-event (matches, single) flags for ``category``.

        ``matches`` honours the rule's source filter; ``single`` marks matching
        events whose source establishes the category without the claim rule.
        """
        rule = codemap.rule(category)
        key = (rule,)
        hit = self._mask_cache.get(key)
        if hit is not None:
            return hit
        match = _rule_event_mask(self, rule)
        single_src = np.array([rule.is_single_source(s) for s in SOURCES], dtype=bool)
        single = match & single_src[self.source]
        match.flags.writeable = False
        single.flags.writeable = False
        self._mask_cache[key] = (match, single)
        return match, single

    def first_satisfied_days(self, codemap: CodeMap, category: str) -> np.ndarray:
        """Per-person day on which ``category``'s case rule is first satisfied."""
        rule = codemap.rule(category)
        match, single = self.category_mask(codemap, category)
        if rule.min_claims == 1:
            return _first_day_per_person(self, match)
        out = _first_day_per_person(self, single)
        chained = match & ~single
        persons = self.person[chained]
        days = self.day[chained]
        counts = np.bincount(persons, minlength=self.n_persons)
        starts = np.concatenate([[0], np.cumsum(counts)])
        for p in np.flatnonzero(counts >= rule.min_claims):
            hit = rule_first_satisfied(days[starts[p]:starts[p + 1]].tolist(), rule)
            if hit is not None and hit < out[p]:
                out[p] = hit
        return out

    # -- identity -----------------------------------------------------------
    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for pid in self.person_ids:
            p = self.persons[pid]
            h.update(f"{pid}\x1f{p.sex}\x1f{p.birth_year}\x1e".encode())
        h.update("\x1f".join(self.vocab).encode())
        for a in (self.person, self.day, self.source, self.kind, self.system, self.code):
            h.update(a.tobytes())
        h.update(repr(self.date_range).encode())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStore):
            return NotImplemented
        return self.fingerprint == other.fingerprint

    __hash__ = None  # mutable caches; identity via fingerprint

    def __repr__(self) -> str:
        return f"EventStore(n_persons={self.n_persons}, n_events={self.n_events}, date_range={self.date_range})"


def _rule_event_mask(store: EventStore, rule: CaseRule) -> np.ndarray:
    if store.n_events == 0:
        return np.zeros(0, dtype=bool)
    # classify each distinct (code, system) pair once
    pair = store.code.astype(np.int64) * len(SYSTEMS) + store.system
    uniq, inv = np.unique(pair, return_inverse=True)
    ok = np.array([
        rule.matches_code(NormalizedCode(SYSTEMS[u % len(SYSTEMS)], store.vocab[u // len(SYSTEMS)]))
        for u in uniq.tolist()
    ], dtype=bool)
    src_ok = np.array([rule.accepts_source(s) for s in SOURCES], dtype=bool)
    return ok[inv.reshape(-1)] & src_ok[store.source]


def _first_day_per_person(store: EventStore, mask: np.ndarray) -> np.ndarray:
    out = np.full(store.n_persons, NEVER, dtype=np.int64)
    persons = store.person[mask]
    if len(persons):
        # events are sorted by (person, day): first hit per person is the earliest
        uniq, first = np.unique(persons, return_index=True)
        out[uniq] = store.day[mask][first]
    return out


# -- single-person queries ---------------------------------------------------

def first_record_date(store: EventStore, person_id: str) -> date | None:
    s = store.event_slice(person_id)
    return from_day(store.day[s.start]) if s.stop > s.start else None


def last_record_date(store: EventStore, person_id: str) -> date | None:
    s = store.event_slice(person_id)
    return from_day(store.day[s.stop - 1]) if s.stop > s.start else None


def first_outcome_date(store: EventStore, person_id: str, codemap: CodeMap, outcome_category: str) -> date | None:
    rule = codemap.outcome_rule(outcome_category)
    s = store.event_slice(person_id)
    match, single = store.category_mask(codemap, rule.category_name)
    m = match[s]
    days = store.day[s][m].tolist()
    hit = first_satisfied_day(days, single[s][m].tolist(), rule)
    return from_day(hit) if hit is not None else None


# -- construction and I/O ----------------------------------------------------

def build_store(persons: Sequence[PersonRecord], events: Iterable[EventRecord] | EventTable,
                date_range: tuple[date, date] | None = None) -> EventStore:
    if not isinstance(events, EventTable):
        index = {p.person_id: i for i, p in enumerate(persons)}
        events = EventTable.from_records(events, index)
    return EventStore(persons, events, date_range)


def _validate_person(pid: str, sex: str, birth_year: str, line: int, max_year: int) -> PersonRecord:
    if not pid:
        raise SchemaError("empty person_id", line)
    if sex not in ("M", "F"):
        raise SchemaError(f"sex must be M or F, got {sex!r}", line)
    if not re.fullmatch(r"\d{4}", birth_year):
        raise SchemaError(f"birth_year must be a 4-digit year, got {birth_year!r}", line)
    y = int(birth_year)
    if not 1900 <= y <= max_year:
        raise SchemaError(f"birth_year {y} outside [1900, {max_year}]", line)
    return PersonRecord(pid, sex, y)


def read_persons(path: str | Path) -> tuple[list[PersonRecord], tuple[date, date] | None]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    date_range = None
    first = 0
    if lines and lines[0].startswith("#"):
        m = _RANGE_LINE.fullmatch(lines[0])
        if not m:
            raise SchemaError("unrecognised preamble line", 1)
        date_range = (parse_date(m.group(1)), parse_date(m.group(2)))
        first = 1
    if len(lines) <= first or lines[first].split(",") != PERSONS_HEADER:
        raise SchemaError(f"persons header must be {','.join(PERSONS_HEADER)}", first + 1)
    max_year = date.today().year
    persons, seen = [], set()
    for n, line in enumerate(lines[first + 1:], start=first + 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise SchemaError(f"expected 3 fields, got {len(parts)}", n)
        rec = _validate_person(parts[0].strip(), parts[1].strip(), parts[2].strip(), n, max_year)
        if rec.person_id in seen:
            raise SchemaError(f"duplicate person_id {rec.person_id!r}", n)
        seen.add(rec.person_id)
        persons.append(rec)
    return persons, date_range


def read_events(path: str | Path, persons: Sequence[PersonRecord]) -> EventTable:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n")
    if header.split(",") != EVENTS_HEADER:
        raise SchemaError(f"events header must be {','.join(EVENTS_HEADER)}", 1)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=True,
                         engine="c", skipinitialspace=True)
    except pd.errors.ParserError as exc:
        raise SchemaError(f"malformed events file: {exc}") from None
    if len(df) == 0:
        return EventTable.empty()
    lines = np.arange(len(df)) + 2

    def fail_at(mask: np.ndarray, cls, msg: str):
        if mask.any():
            i = int(np.flatnonzero(mask)[0])
            raise cls(f"{msg}: {df.iloc[i].tolist()}", int(lines[i]))

    cols = {c: df[c].str.strip().to_numpy() for c in EVENTS_HEADER}
    for c in EVENTS_HEADER:
        fail_at(cols[c] == "", SchemaError, f"empty {c}")

    index = {p.person_id: i for i, p in enumerate(persons)}
    pid_codes, pid_uniques = pd.factorize(cols["person_id"])
    pid_map = np.array([index.get(u, -1) for u in pid_uniques], dtype=np.int64)
    person = pid_map[pid_codes]
    if (person < 0).any():
        i = int(np.flatnonzero(person < 0)[0])
        raise OrphanEvent(cols["person_id"][i], int(lines[i]))

    date_codes, date_uniques = pd.factorize(cols["date"])
    uniq_days = []
    for j, u in enumerate(date_uniques):
        try:
            uniq_days.append(to_day(parse_date(u)))
        except BadDate as exc:
            i = int(np.flatnonzero(date_codes == j)[0])
            raise BadDate(str(exc), int(lines[i])) from None
    day = np.array(uniq_days, dtype=np.int32)[date_codes]

    def enum_col(name: str, values: tuple, key) -> np.ndarray:
        codes, uniques = pd.factorize(cols[name])
        lookup = {key(v): k for k, v in enumerate(values)}
        table = np.array([lookup.get(u, -1) for u in uniques], dtype=np.int64)
        out = table[codes]
        fail_at(out < 0, SchemaError, f"unknown {name}")
        return out.astype(np.int8)

    source = enum_col("source", SOURCES, lambda v: v.value)
    kind = enum_col("kind", KINDS, lambda v: v.value)
    system = enum_col("code_system", SYSTEMS, lambda v: v.value)
    allowed = np.zeros((len(SOURCES), len(SYSTEMS)), dtype=bool)
    for s, systems in ALLOWED_SYSTEMS.items():
        for cs in systems:
            allowed[SOURCES.index(s), SYSTEMS.index(cs)] = True
    fail_at(~allowed[source, system], SchemaError, "code_system not allowed for source")

    code_codes, code_uniques = pd.factorize(cols["code"])
    normalized = []
    for j, u in enumerate(code_uniques):
        try:
            normalized.append(normalize_text(u))
        except ValidationError as exc:
            i = int(np.flatnonzero(code_codes == j)[0])
            raise SchemaError(str(exc), int(lines[i])) from None
    vocab = sorted(set(normalized))
    vix = {c: i for i, c in enumerate(vocab)}
    code = np.array([vix[c] for c in normalized], dtype=np.int32)[code_codes]
    return EventTable(person.astype(np.int32), day, source, kind, system, code, tuple(vocab))


def load_store(persons_path: str | Path, events_path: str | Path) -> EventStore:
    persons, date_range = read_persons(persons_path)
    events = read_events(events_path, persons)
    if date_range is not None and len(events):
        lo, hi = to_day(date_range[0]), to_day(date_range[1])
        bad = (events.day < lo) | (events.day > hi)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise BadDate(f"event dated {from_day(events.day[i])} outside declared range "
                          f"{date_range[0]}..{date_range[1]}", i + 2)
    return EventStore(persons, events, date_range)


def persons_csv(persons: Iterable[PersonRecord], date_range: tuple[date, date] | None) -> str:
    buf = io.StringIO()
    if date_range is not None:
        buf.write(f"# date_range={date_range[0].isoformat()},{date_range[1].isoformat()}\n")
    buf.write(",".join(PERSONS_HEADER) + "\n")
    for p in persons:
        buf.write(f"{p.person_id},{p.sex},{p.birth_year}\n")
    return buf.getvalue()


def events_csv(person_ids: Sequence[str], events: EventTable | EventStore) -> str:
    n = len(events.day) if isinstance(events, EventStore) else len(events)
    header = ",".join(EVENTS_HEADER) + "\n"
    if n == 0:
        return header
    pid = np.asarray(person_ids, dtype=object)[events.person]
    dates = np.datetime_as_string(events.day.astype("datetime64[D]"), unit="D")
    src = np.array([s.value for s in SOURCES], dtype=object)[events.source]
    kind = np.array([k.value for k in KINDS], dtype=object)[events.kind]
    system = np.array([s.value for s in SYSTEMS], dtype=object)[events.system]
    code = np.asarray(events.vocab, dtype=object)[events.code]
    body = "\n".join(map(",".join, zip(pid, dates.astype(object), src, kind, system, code)))
    return header + body + "\n"


def write_store(store: EventStore, persons_path: str | Path, events_path: str | Path) -> None:
    persons = [store.persons[pid] for pid in store.person_ids]
    Path(persons_path).write_text(persons_csv(persons, store.date_range), encoding="utf-8", newline="\n")
    Path(events_path).write_text(events_csv(store.person_ids, store), encoding="utf-8", newline="\n")
