"""Synthetic administrative corpora with known ground truth.

Each person gets an enrollment span, latent category indicators, Poisson event
streams for active categories and a first-outcome day drawn from a constant
per-day hazard ``sigmoid(intercept + beta . x + interactions)``. All draws come
from counter-based streams keyed by ``(seed, person index, stream)`` (see
:mod:`flexcohort._rng`), so output bytes never depend on generation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import expit

from . import _rng
from ._toml import load_toml
from .codemap import CodeMap, CodeSystem, Exact, Kind, NormalizedCode, Prefix, Source, load_codemap
from .errors import InvalidConfig
from .events import (
    ALLOWED_SYSTEMS,
    KINDS,
    NEVER,
    SOURCES,
    SYSTEMS,
    EventRecord,
    EventTable,
    PersonRecord,
    from_day,
    parse_date,
    to_day,
)

DAYS_PER_YEAR = 365.25
STATIC_FEATURES = ("sex_male",)

# stream labels; categories offset by their position
_S_SEX, _S_BIRTH, _S_FULL, _S_START, _S_END = 1, 2, 3, 4, 5
_S_BASE_COUNT, _S_BASE_TIME = 10, 11
_S_OUTCOME, _S_POST_COUNT, _S_POST_TIME = 20, 21, 22
_S_ACTIVE, _S_COUNT, _S_TIME = 1000, 2000, 3000


@dataclass(frozen=True)
class CategorySpec:
    name: str
    prevalence: float
    mean_events_per_year: float


@dataclass
class SynthConfig:
    n_persons: int
    date_range: tuple[date, date]
    category_specs: list[CategorySpec]
    true_beta: dict[str, float]
    intercept: float
    outcome_category: str
    interaction_terms: list[tuple[str, str, float]] = field(default_factory=list)
    full_enrollment_fraction: float = 0.5
    base_visits_per_year: float = 2.0
    post_outcome_events_per_year: float = 1.0
    age_range: tuple[int, int] = (18, 65)

    def validate(self, codemap: CodeMap) -> None:
        if self.n_persons < 0:
            raise InvalidConfig("n_persons must be >= 0")
        lo, hi = self.date_range
        if lo >= hi:
            raise InvalidConfig("date_range must be non-empty")
        names = [c.name for c in self.category_specs]
        if len(set(names)) != len(names):
            raise InvalidConfig("duplicate category in category_specs")
        for c in self.category_specs:
            if not 0.0 <= c.prevalence <= 1.0:
                raise InvalidConfig(f"{c.name}: prevalence must be in [0, 1]")
            if not c.mean_events_per_year > 0:
                raise InvalidConfig(f"{c.name}: mean_events_per_year must be > 0")
            if c.name not in codemap.names:
                raise InvalidConfig(f"{c.name}: not a codemap category")
        if self.outcome_category in names:
            raise InvalidConfig("outcome_category cannot also be a feature category")
        if self.outcome_category not in codemap.outcome_categories:
            raise InvalidConfig(f"{self.outcome_category!r} is not an outcome category of the codemap")
        known = set(names) | set(STATIC_FEATURES)
        for f in self.true_beta:
            if f not in known:
                raise InvalidConfig(f"true_beta names unknown feature {f!r}")
        for a, b, _ in self.interaction_terms:
            if a not in known or b not in known:
                raise InvalidConfig(f"interaction ({a}, {b}) names an unknown feature")
        for v in [self.intercept, *self.true_beta.values(), *(g for _, _, g in self.interaction_terms)]:
            if not math.isfinite(v):
                raise InvalidConfig("coefficients must be finite")
        if not 0.0 <= self.full_enrollment_fraction <= 1.0:
            raise InvalidConfig("full_enrollment_fraction must be in [0, 1]")
        if self.base_visits_per_year < 0 or self.post_outcome_events_per_year < 0:
            raise InvalidConfig("event rates must be >= 0")
        a_lo, a_hi = self.age_range
        if not 18 <= a_lo <= a_hi:
            raise InvalidConfig("age_range must satisfy 18 <= lo <= hi")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        try:
            cats = [CategorySpec(c["name"], float(c["prevalence"]), float(c["events_per_year"]))
                    for c in d.get("category", [])]
            inter = [(t["a"], t["b"], float(t["coefficient"])) for t in d.get("interaction", [])]
            kw = {}
            for k in ("full_enrollment_fraction", "base_visits_per_year", "post_outcome_events_per_year"):
                if k in d:
                    kw[k] = float(d[k])
            if "age_range" in d:
                kw["age_range"] = tuple(int(a) for a in d["age_range"])
            return cls(
                n_persons=int(d["n_persons"]),
                date_range=(parse_date(str(d["start"])), parse_date(str(d["end"]))),
                category_specs=cats,
                true_beta={k: float(v) for k, v in d.get("true_beta", {}).items()},
                intercept=float(d["intercept"]),
                outcome_category=d["outcome_category"],
                interaction_terms=inter,
                **kw,
            )
        except KeyError as exc:
            raise InvalidConfig(f"missing config key {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from None


def load_synth_config(path: str | Path) -> SynthConfig:
    return SynthConfig.from_dict(load_toml(path))


@dataclass
class GroundTruth:
    person_ids: list[str]
    feature_names: list[str]
    indicators: np.ndarray  # (n_persons, n_features) 0/1, columns = feature_names
    true_beta: dict[str, float]
    intercept: float
    interaction_terms: list[tuple[str, str, float]]
    enroll_start: np.ndarray
    enroll_end: np.ndarray
    outcome_day: np.ndarray  # NEVER when no outcome during enrollment

    def outcome_date(self, i: int) -> date | None:
        d = int(self.outcome_day[i])
        return None if d == NEVER else from_day(d)

    def to_json(self) -> str:
        persons = []
        for i, pid in enumerate(self.person_ids):
            od = self.outcome_date(i)
            persons.append({
                "person_id": pid,
                "indicators": {f: int(self.indicators[i, j]) for j, f in enumerate(self.feature_names)},
                "enrollment": [from_day(self.enroll_start[i]).isoformat(), from_day(self.enroll_end[i]).isoformat()],
                "outcome_date": od.isoformat() if od else None,
            })
        doc = {
            "true_beta": self.true_beta,
            "intercept": self.intercept,
            "interactions": [list(t) for t in self.interaction_terms],
            "persons": persons,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _representative(codemap: CodeMap, category: str) -> tuple[Source, Kind, CodeSystem, str]:
    """A concrete (source, kind, system, code) that the category's rule accepts.

    Prefers ICD-10 codes, and sources on which a single record establishes the
    category, so latent indicators translate into observable features.
    """
    rule = codemap.rule(category)
    preference = [CodeSystem.ICD10, CodeSystem.ICD9, CodeSystem.PROVIDER, CodeSystem.DIN]
    fallback = None
    for p in sorted(rule.patterns, key=lambda p: preference.index(p.system)):
        code = p.code if isinstance(p, Exact) else p.stem if isinstance(p, Prefix) else p.lo
        kind = _KIND_FOR_SYSTEM.get(p.system, Kind.DIAGNOSIS)
        for src in Source:
            if p.system not in ALLOWED_SYSTEMS[src] or not rule.accepts_source(src):
                continue
            if rule.is_single_source(src):
                return src, kind, p.system, code
            fallback = fallback or (src, kind, p.system, code)
    if fallback is None:
        raise InvalidConfig(f"cannot synthesise events for category {category!r}")
    return fallback


_KIND_FOR_SYSTEM = {CodeSystem.PROVIDER: Kind.VISIT, CodeSystem.DIN: Kind.DISPENSE}


def _poisson(u: np.ndarray, mu: np.ndarray) -> np.ndarray:
    out = np.zeros(len(u), dtype=np.int64)
    pos = mu > 0
    out[pos] = stats.poisson.ppf(u[pos], mu[pos]).astype(np.int64)
    return out


def _expand(keys: np.ndarray, persons: np.ndarray, counts: np.ndarray, stream: int,
            start: np.ndarray, span: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Uniform event days for ``counts[i]`` events of ``persons[i]`` within its span."""
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    rep = np.repeat(np.arange(len(persons)), counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    k = np.arange(total) - first
    pid = persons[rep]
    u = _rng.uniform(_rng.derive(_rng.derive(keys[pid], stream), k))
    days = start[pid] + np.floor(u * (span[pid] + 1)).astype(np.int64)
    return pid, days


def generate(config: SynthConfig, seed: int, codemap: CodeMap | None = None):
    """Return ``(persons, events, truth)`` for ``config``; pure in ``(config, seed)``."""
    codemap = codemap or load_codemap()
    config.validate(codemap)
    n = config.n_persons
    cats = [c.name for c in config.category_specs]
    feature_names = list(STATIC_FEATURES) + cats
    width = max(6, len(str(max(n - 1, 0))))
    person_ids = [f"P{i:0{width}d}" for i in range(n)]

    idx = np.arange(n, dtype=np.uint64)
    keys = _rng.derive(_rng.seed_key(seed), idx)

    def draw(stream: int) -> np.ndarray:
        return _rng.uniform(_rng.derive(keys, stream)) if n else np.zeros(0)

    male = draw(_S_SEX) < 0.5
    r0, r1 = to_day(config.date_range[0]), to_day(config.date_range[1])
    a_lo, a_hi = config.age_range
    y_hi = config.date_range[0].year - a_lo
    y_lo = config.date_range[0].year - a_hi
    birth_year = y_lo + np.floor(draw(_S_BIRTH) * (y_hi - y_lo + 1)).astype(np.int64)

    full = draw(_S_FULL) < config.full_enrollment_fraction
    start = r0 + np.floor(draw(_S_START) * (r1 - r0 + 1)).astype(np.int64)
    end = start + np.floor(draw(_S_END) * (r1 - start + 1)).astype(np.int64)
    start = np.where(full, r0, start)
    end = np.where(full, r1, end)
    span = end - start
    years = (span + 1) / DAYS_PER_YEAR

    indicators = np.zeros((n, len(feature_names)), dtype=np.int8)
    indicators[:, 0] = male
    for j, spec in enumerate(config.category_specs):
        indicators[:, 1 + j] = draw(_S_ACTIVE + j) < spec.prevalence

    col = {f: j for j, f in enumerate(feature_names)}
    eta = np.full(n, config.intercept, dtype=np.float64)
    for f, b in config.true_beta.items():
        eta += b * indicators[:, col[f]]
    for a, b, g in config.interaction_terms:
        eta += g * indicators[:, col[a]] * indicators[:, col[b]]
    p_day = expit(eta)
    # geometric waiting time (>= 1 day) after enrollment start
    with np.errstate(divide="ignore"):
        wait = np.ceil(np.log(draw(_S_OUTCOME)) / np.log1p(-p_day))
    wait = np.where(p_day > 0, wait, np.inf)
    outcome = np.where(start + wait <= end, start + np.minimum(wait, 1e9), NEVER).astype(np.int64)

    # assemble event columns
    pieces = []  # (persons, days, (source, kind, system, code))
    all_p = np.arange(n, dtype=np.int64)
    gp = (Source.CLAIMS, Kind.VISIT, CodeSystem.PROVIDER, "GP")
    pieces.append((all_p, start, gp))
    counts = _poisson(draw(_S_BASE_COUNT), config.base_visits_per_year * years)
    pieces.append((*_expand(keys, all_p, counts, _S_BASE_TIME, start, span), gp))

    for j, spec in enumerate(config.category_specs):
        rep = _representative(codemap, spec.name)
        _check_not_outcome(codemap, config.outcome_category, rep)
        active = np.flatnonzero(indicators[:, 1 + j])
        pieces.append((active, start[active], rep))
        counts = _poisson(draw(_S_COUNT + j)[active], spec.mean_events_per_year * years[active])
        pieces.append((*_expand(keys, active, counts, _S_TIME + j, start, span), rep))

    out_rep = _representative(codemap, config.outcome_category)
    has_out = np.flatnonzero(outcome != NEVER)
    pieces.append((has_out, outcome[has_out], out_rep))
    rest = np.zeros(n, dtype=np.int64)
    rest[has_out] = end[has_out] - outcome[has_out]
    post_counts = _poisson(draw(_S_POST_COUNT)[has_out],
                           config.post_outcome_events_per_year * rest[has_out] / DAYS_PER_YEAR)
    pieces.append((*_expand(keys, has_out, post_counts, _S_POST_TIME, outcome, rest), out_rep))

    vocab = sorted({rep[3] for *_, rep in pieces})
    vix = {c: i for i, c in enumerate(vocab)}
    cols = {k: [] for k in ("person", "day", "source", "kind", "system", "code")}
    for persons, days, (src, kind, system, code) in pieces:
        m = len(persons)
        cols["person"].append(np.asarray(persons, dtype=np.int32))
        cols["day"].append(np.asarray(days, dtype=np.int32))
        cols["source"].append(np.full(m, SOURCES.index(src), dtype=np.int8))
        cols["kind"].append(np.full(m, KINDS.index(kind), dtype=np.int8))
        cols["system"].append(np.full(m, SYSTEMS.index(system), dtype=np.int8))
        cols["code"].append(np.full(m, vix[code], dtype=np.int32))
    events = EventTable(**{k: np.concatenate(v) for k, v in cols.items()}, vocab=tuple(vocab))

    persons = [PersonRecord(pid, "M" if m else "F", int(y)) for pid, m, y in zip(person_ids, male, birth_year)]
    truth = GroundTruth(
        person_ids=person_ids,
        feature_names=feature_names,
        indicators=indicators,
        true_beta=dict(config.true_beta),
        intercept=config.intercept,
        interaction_terms=list(config.interaction_terms),
        enroll_start=start,
        enroll_end=end,
        outcome_day=outcome,
    )
    return persons, events, truth


def _check_not_outcome(codemap: CodeMap, outcome: str, rep) -> None:
    src, _, system, code = rep
    rule = codemap.rule(outcome)
    if rule.accepts_source(src) and rule.matches_code(NormalizedCode(system, code)):
        raise InvalidConfig(f"feature code {code} would also register as outcome {outcome!r}")


# -- the four-person corpus used to illustrate fixed vs flexible windows -----

FIXTURE_DATE_RANGE = (date(2013, 4, 1), date(2020, 3, 31))
FIXTURE_OBS_START = date(2013, 4, 1)
FIXTURE_INDEX_DATE = date(2018, 3, 31)
FIXTURE_PRED_END = date(2020, 3, 31)
FIXTURE_OUTCOME = "homelessness"

_FIXTURE_PERSONS = [
    PersonRecord("P1", "F", 1980),
    PersonRecord("P2", "M", 1975),
    PersonRecord("P3", "F", 1990),
    PersonRecord("P4", "M", 1968),
]

_FIXTURE_EVENTS = [
    # P1: first outcome inside the prediction window
    ("P1", "2014-02-10", "CLAIMS", "visit", "PROVIDER", "GP"),
    ("P1", "2015-06-01", "NACRS", "diagnosis", "ICD10", "F329"),
    ("P1", "2016-11-20", "CLAIMS", "visit", "PROVIDER", "PSYC"),
    ("P1", "2017-09-15", "NACRS", "diagnosis", "ICD10", "F102"),
    ("P1", "2019-01-20", "DAD", "diagnosis", "ICD10", "Z590"),
    ("P1", "2019-08-01", "CLAIMS", "visit", "PROVIDER", "GP"),
    # P2: first outcome inside the observation window, second one later
    ("P2", "2013-09-01", "CLAIMS", "visit", "PROVIDER", "GP"),
    ("P2", "2014-04-12", "NACRS", "diagnosis", "ICD10", "F111"),
    ("P2", "2015-03-10", "NACRS", "diagnosis", "ICD10", "Z590"),
    ("P2", "2016-05-05", "NACRS", "diagnosis", "ICD10", "F102"),
    ("P2", "2017-02-02", "CLAIMS", "visit", "PROVIDER", "PSYC"),
    ("P2", "2019-06-01", "DAD", "diagnosis", "ICD10", "Z591"),
    # P3: never an outcome
    ("P3", "2013-06-15", "CLAIMS", "visit", "PROVIDER", "GP"),
    ("P3", "2015-10-10", "CLAIMS", "visit", "PROVIDER", "PSYC"),
    ("P3", "2017-12-01", "NACRS", "diagnosis", "ICD10", "F410"),
    ("P3", "2019-11-30", "CLAIMS", "visit", "PROVIDER", "GP"),
    # P4: records start mid-window, outcome before the index date
    ("P4", "2016-01-10", "CLAIMS", "visit", "PROVIDER", "GP"),
    ("P4", "2017-05-20", "NACRS", "diagnosis", "ICD10", "Z590"),
    ("P4", "2018-08-08", "CLAIMS", "visit", "PROVIDER", "GP"),
    ("P4", "2019-03-03", "NACRS", "diagnosis", "ICD10", "F205"),
]


def four_person_fixture() -> tuple[list[PersonRecord], list[EventRecord]]:
    events = [
        EventRecord(pid, parse_date(d), Source(src), Kind(kind), CodeSystem(system), code)
        for pid, d, src, kind, system, code in _FIXTURE_EVENTS
    ]
    return list(_FIXTURE_PERSONS), events
