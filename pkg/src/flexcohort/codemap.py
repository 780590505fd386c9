"""Diagnostic-code patterns, temporal case definitions and the codemap file format.

Codemap file grammar (UTF-8, line oriented)::

    file      := { blank | comment | block }
    comment   := optional whitespace, "#", anything to end of line
    block     := header NEWLINE pattern_line { pattern_line }
    header    := "category" WS name { WS option }
    name      := [a-z0-9_]+
    option    := "outcome"
               | "source=" SOURCE { "," SOURCE }
               | "single=" SOURCE { "," SOURCE }
               | "claims=" INT | "sep=" INT | "within=" INT
    SOURCE    := DAD | NACRS | CLAIMS | PIN
    pattern_line := WS system ":" pattern { "," pattern }
    system    := icd9 | icd10 | provider | din

Pattern lines must be indented. A pattern is ``CODE`` (exact), ``STEM.X`` or
``STEMX`` after a digit (prefix), or ``LO-HI`` with ``-``, en- or em-dash
(range; ``.X`` on endpoints is ignored, ``F06.0-2`` abbreviates ``F060-F062``).
Provider and DIN patterns are always exact tokens.

Defaults: ``claims=1 sep=0 within=730``. ``source=`` restricts which event
sources can match at all; ``single=`` names sources whose records establish the
category on their own, bypassing the multi-claim rule (hospital and ED records
versus physician claims).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence, Union

from .errors import (
    CodemapParseError,
    DuplicateCategory,
    EmptyCode,
    IllegalCharacter,
    MalformedRange,
    UnknownCategory,
    UnsortedInput,
    ValidationError,
)


class CodeSystem(str, Enum):
    ICD9 = "ICD9"
    ICD10 = "ICD10"
    PROVIDER = "PROVIDER"
    DIN = "DIN"


class Source(str, Enum):
    DAD = "DAD"
    NACRS = "NACRS"
    CLAIMS = "CLAIMS"
    PIN = "PIN"


class Kind(str, Enum):
    DIAGNOSIS = "diagnosis"
    VISIT = "visit"
    DISPENSE = "dispense"


ICD_SYSTEMS = (CodeSystem.ICD9, CodeSystem.ICD10)
PROVIDER_TOKENS = ("GP", "NEUR", "INMD", "PSYC", "OTHER")

_FILE_SYSTEM_NAMES = {
    "icd9": CodeSystem.ICD9,
    "icd10": CodeSystem.ICD10,
    "provider": CodeSystem.PROVIDER,
    "din": CodeSystem.DIN,
}
_SYSTEM_FILE_NAMES = {v: k for k, v in _FILE_SYSTEM_NAMES.items()}

_ALLOWED_CHARS = re.compile(r"[A-Za-z0-9. ]+")
_DASHES = re.compile("\\s*[-\u2013\u2014]\\s*")
_STEM_TAIL = re.compile(r"([A-Z]*)(.*)")
_NAME = re.compile(r"[a-z0-9_]+")

DEFAULT_WITHIN_DAYS = 730


class UnknownCodeSystem(ValidationError):
    pass


def coerce_system(system) -> CodeSystem:
    if isinstance(system, CodeSystem):
        return system
    try:
        return CodeSystem(str(system).upper())
    except ValueError:
        raise UnknownCodeSystem(f"unknown code system {system!r}") from None


@dataclass(frozen=True, order=True)
class NormalizedCode:
    system: CodeSystem
    text: str

    def __str__(self) -> str:
        return self.text


def normalize_text(raw: str) -> str:
    """Dot- and whitespace-free uppercase form of ``raw``."""
    s = raw.strip()
    if not s:
        raise EmptyCode("empty diagnostic code")
    if not _ALLOWED_CHARS.fullmatch(s):
        bad = next(ch for ch in s if not _ALLOWED_CHARS.fullmatch(ch))
        raise IllegalCharacter(f"illegal character {bad!r} in code {raw!r}")
    text = s.replace(".", "").replace(" ", "").upper()
    if not text:
        raise EmptyCode(f"code {raw!r} has no alphanumeric content")
    return text


def normalize_code(raw: str, system) -> NormalizedCode:
    return NormalizedCode(coerce_system(system), normalize_text(raw))


def _split_stem(text: str) -> tuple[str, str]:
    m = _STEM_TAIL.fullmatch(text)
    return m.group(1), m.group(2)


@dataclass(frozen=True)
class Exact:
    system: CodeSystem
    code: str

    def matches(self, code: NormalizedCode) -> bool:
        return code.system == self.system and code.text == self.code

    def __str__(self) -> str:
        return self.code


@dataclass(frozen=True)
class Prefix:
    system: CodeSystem
    stem: str

    def __post_init__(self):
        if not self.stem:
            raise MalformedRange("prefix pattern needs a non-empty stem")

    def matches(self, code: NormalizedCode) -> bool:
        return code.system == self.system and code.text.startswith(self.stem)

    def __str__(self) -> str:
        return self.stem + ".X"


@dataclass(frozen=True)
class Range:
    """Inclusive code range on a shared alphabetic stem.

    Numeric tails are right-padded with zeros to the wider endpoint; a code is
    compared on its tail truncated to that width, so ``F123`` falls in
    ``F10-F19`` and ``E978`` does not fall in ``E970-E976``.
    """

    system: CodeSystem
    lo: str
    hi: str
    stem: str = field(init=False, compare=False, repr=False)
    width: int = field(init=False, compare=False, repr=False)
    lo_tail: str = field(init=False, compare=False, repr=False)
    hi_tail: str = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        lo_stem, lo_tail = _split_stem(self.lo)
        hi_stem, hi_tail = _split_stem(self.hi)
        if lo_stem != hi_stem:
            raise MalformedRange(f"range endpoints {self.lo}-{self.hi} have different stems")
        if not lo_tail or not hi_tail:
            raise MalformedRange(f"range endpoints {self.lo}-{self.hi} need a numeric part")
        width = max(len(lo_tail), len(hi_tail))
        lo_tail, hi_tail = lo_tail.ljust(width, "0"), hi_tail.ljust(width, "0")
        if lo_tail > hi_tail:
            raise MalformedRange(f"range {self.lo}-{self.hi} has lo > hi")
        object.__setattr__(self, "stem", lo_stem)
        object.__setattr__(self, "width", width)
        object.__setattr__(self, "lo_tail", lo_tail)
        object.__setattr__(self, "hi_tail", hi_tail)

    def matches(self, code: NormalizedCode) -> bool:
        if code.system != self.system or not code.text.startswith(self.stem):
            return False
        stem, tail = _split_stem(code.text)
        if stem != self.stem or len(tail) < self.width:
            return False
        return self.lo_tail <= tail[: self.width] <= self.hi_tail

    def __str__(self) -> str:
        return f"{self.lo}-{self.hi}"


CodePattern = Union[Exact, Prefix, Range]


def matches(pattern: CodePattern, code: NormalizedCode) -> bool:
    return pattern.matches(code)


def _strip_prefix_marker(token: str) -> tuple[str, bool]:
    """Remove a trailing ``.X`` / ``X`` wildcard marker; report whether one was present."""
    t = token.strip()
    up = t.upper()
    if up.endswith(".X"):
        return t[:-2], True
    if len(up) >= 2 and up.endswith("X") and up[-2].isdigit():
        return t[:-1], True
    return t, False


def parse_pattern(text: str, system) -> CodePattern:
    system = coerce_system(system)
    token = text.strip()
    if not token:
        raise EmptyCode("empty pattern")
    if system not in ICD_SYSTEMS:
        return Exact(system, normalize_text(token))

    parts = _DASHES.split(token)
    if len(parts) == 2:
        lo_raw, _ = _strip_prefix_marker(parts[0])
        hi_raw, _ = _strip_prefix_marker(parts[1])
        lo = normalize_text(lo_raw)
        hi = normalize_text(hi_raw)
        lo_stem, lo_tail = _split_stem(lo)
        hi_stem, hi_tail = _split_stem(hi)
        if lo_stem and not hi_stem and len(hi) < len(lo_tail):
            # "F06.0-2" shorthand: hi replaces the trailing digits of lo
            hi = lo[: len(lo) - len(hi)] + hi
        return Range(system, lo, hi)
    if len(parts) > 2:
        raise MalformedRange(f"pattern {text!r} has more than one dash")

    stem, is_prefix = _strip_prefix_marker(token)
    if is_prefix:
        return Prefix(system, normalize_text(stem))
    return Exact(system, normalize_text(token))


@dataclass(frozen=True)
class CaseRule:
    """A category's code patterns plus its temporal case definition."""

    category_name: str
    patterns: tuple[CodePattern, ...]
    min_claims: int = 1
    min_separation_days: int = 0
    within_days: int = DEFAULT_WITHIN_DAYS
    source_filter: frozenset[Source] | None = None
    single_sources: frozenset[Source] = frozenset()

    def __post_init__(self):
        if self.min_claims < 1:
            raise ValidationError(f"{self.category_name}: claims must be >= 1")
        if self.min_separation_days < 0:
            raise ValidationError(f"{self.category_name}: sep must be >= 0")
        if self.within_days < 1:
            raise ValidationError(f"{self.category_name}: within must be >= 1")
        if self.min_claims == 1 and self.min_separation_days != 0:
            raise ValidationError(f"{self.category_name}: single-claim rule cannot set sep")
        if self.within_days < self.min_separation_days:
            raise ValidationError(f"{self.category_name}: within < sep")

    @property
    def systems(self) -> frozenset[CodeSystem]:
        return frozenset(p.system for p in self.patterns)

    def matches_code(self, code: NormalizedCode) -> bool:
        return any(p.matches(code) for p in self.patterns)

    def accepts_source(self, source: Source) -> bool:
        return self.source_filter is None or source in self.source_filter

    def is_single_source(self, source: Source) -> bool:
        return self.min_claims == 1 or source in self.single_sources


def _first_chain_end(days: Sequence[int], k: int, sep: int, within: int) -> int | None:
    n = len(days)
    for j in range(k - 1, n):
        dj = days[j]
        for i in range(j - k + 2):
            if dj - days[i] > within:
                continue
            # greedy earliest picks from i maximise the chain length reaching dj
            count, last = 1, days[i]
            for m in range(i + 1, j + 1):
                if days[m] - last >= sep:
                    count += 1
                    last = days[m]
                    if count >= k:
                        return dj
    return None


def rule_first_satisfied(dates: Sequence, rule: CaseRule):
    """Earliest date at which ``rule`` is satisfied by the sorted claim ``dates``.

    ``dates`` may be ``datetime.date`` objects or integer day numbers; the
    result has the same type. For ``min_claims = k`` the answer is the earliest
    claim that closes a run of ``k`` claims spanning at most ``within_days``
    with consecutive gaps of at least ``min_separation_days``.
    """
    as_dates = bool(dates) and isinstance(dates[0], date)
    days = [d.toordinal() for d in dates] if as_dates else [int(d) for d in dates]
    if any(b < a for a, b in zip(days, days[1:])):
        raise UnsortedInput("claim dates must be sorted ascending")
    if not days:
        return None
    if rule.min_claims == 1:
        hit = days[0]
    else:
        hit = _first_chain_end(days, rule.min_claims, rule.min_separation_days, rule.within_days)
    if hit is None:
        return None
    return date.fromordinal(hit) if as_dates else hit


def first_satisfied_day(days: Sequence[int], single: Sequence[bool], rule: CaseRule) -> int | None:
    """Like :func:`rule_first_satisfied` but honours ``single_sources``.

    ``single[i]`` marks claims whose source establishes the category alone.
    """
    first_single = next((d for d, s in zip(days, single) if s), None)
    rest = [d for d, s in zip(days, single) if not s]
    chained = rule_first_satisfied(rest, rule) if rest else None
    candidates = [d for d in (first_single, chained) if d is not None]
    return min(candidates) if candidates else None


@dataclass(frozen=True)
class CodeMap:
    categories: tuple[CaseRule, ...]
    outcome_categories: frozenset[str] = frozenset()

    def __post_init__(self):
        names = [c.category_name for c in self.categories]
        seen = set()
        for n in names:
            if n in seen:
                raise ValidationError(f"duplicate category {n!r}")
            seen.add(n)
        missing = set(self.outcome_categories) - seen
        if missing:
            raise ValidationError(f"outcome categories not defined: {sorted(missing)}")

    @property
    def names(self) -> list[str]:
        return [c.category_name for c in self.categories]

    @property
    def feature_categories(self) -> list[str]:
        return [n for n in self.names if n not in self.outcome_categories]

    def rule(self, name: str) -> CaseRule:
        for c in self.categories:
            if c.category_name == name:
                return c
        raise UnknownCategory(f"unknown category {name!r}")

    def outcome_rule(self, name: str) -> CaseRule:
        if name not in self.outcome_categories:
            raise UnknownCategory(f"{name!r} is not an outcome category")
        return self.rule(name)

    def classify(self, code: NormalizedCode, source: Source | None = None) -> list[str]:
        """Names of every category whose patterns (and source filter) accept ``code``."""
        out = []
        for c in self.categories:
            if source is not None and not c.accepts_source(source):
                continue
            if c.matches_code(code):
                out.append(c.category_name)
        return out


def _parse_sources(value: str, line_no: int, col: int) -> frozenset[Source]:
    out = set()
    for tok in value.split(","):
        try:
            out.add(Source(tok.strip().upper()))
        except ValueError:
            raise CodemapParseError(f"unknown source {tok!r}", line_no, col) from None
    return frozenset(out)


def parse_codemap(text: str) -> CodeMap:
    rules: list[CaseRule] = []
    outcomes: list[str] = []
    current: dict | None = None
    seen: set[str] = set()

    def close(line_no: int):
        if current is None:
            return
        if not current["patterns"]:
            raise CodemapParseError(f"category {current['name']!r} has no patterns", current["line"])
        try:
            rules.append(
                CaseRule(
                    current["name"],
                    tuple(current["patterns"]),
                    current["claims"],
                    current["sep"],
                    current["within"],
                    current["source"],
                    current["single"],
                )
            )
        except ValidationError as exc:
            raise CodemapParseError(str(exc), current["line"]) from None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        indented = raw[0] in " \t"
        if not indented:
            tokens = [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", raw)]
            if tokens[0][0] != "category":
                raise CodemapParseError("expected 'category' header", line_no, tokens[0][1])
            if len(tokens) < 2:
                raise CodemapParseError("category header needs a name", line_no, len(raw) + 1)
            close(line_no)
            name, col = tokens[1]
            if not _NAME.fullmatch(name):
                raise CodemapParseError(f"bad category name {name!r}", line_no, col)
            if name in seen:
                raise DuplicateCategory(f"duplicate category {name!r}", line_no, col)
            seen.add(name)
            current = dict(name=name, line=line_no, patterns=[], claims=1, sep=0,
                           within=DEFAULT_WITHIN_DAYS, source=None, single=frozenset())
            for tok, col in tokens[2:]:
                if tok == "outcome":
                    outcomes.append(name)
                    continue
                key, eq, value = tok.partition("=")
                if not eq or not value:
                    raise CodemapParseError(f"bad option {tok!r}", line_no, col)
                if key == "source":
                    current["source"] = _parse_sources(value, line_no, col)
                elif key == "single":
                    current["single"] = _parse_sources(value, line_no, col)
                elif key in ("claims", "sep", "within"):
                    if not value.isdigit():
                        raise CodemapParseError(f"{key} needs a non-negative integer", line_no, col)
                    current[key] = int(value)
                else:
                    raise CodemapParseError(f"unknown option {key!r}", line_no, col)
            continue

        if current is None:
            raise CodemapParseError("pattern line before any category header", line_no, 1)
        indent = len(raw) - len(raw.lstrip())
        sys_name, colon, rest = stripped.partition(":")
        if not colon:
            raise CodemapParseError("expected '<system>: <patterns>'", line_no, indent + 1)
        system = _FILE_SYSTEM_NAMES.get(sys_name.strip().lower())
        if system is None:
            raise CodemapParseError(f"unknown code system {sys_name.strip()!r}", line_no, indent + 1)
        offset = indent + len(sys_name) + 1
        for m in re.finditer(r"[^,]+", rest):
            tok = m.group()
            if not tok.strip():
                continue
            col = offset + m.start() + (len(tok) - len(tok.lstrip())) + 1
            try:
                current["patterns"].append(parse_pattern(tok, system))
            except ValidationError as exc:
                raise CodemapParseError(str(exc), line_no, col) from None

    close(len(text.splitlines()))
    if not rules:
        raise CodemapParseError("codemap defines no categories", 1)
    return CodeMap(tuple(rules), frozenset(outcomes))


def load_codemap(path: str | Path | None = None) -> CodeMap:
    """Parse a codemap file; ``None`` loads the bundled default."""
    if path is None:
        return parse_codemap(default_codemap_text())
    return parse_codemap(Path(path).read_text(encoding="utf-8"))


def default_codemap_text() -> str:
    return resources.files("flexcohort").joinpath("data/default.codemap").read_text(encoding="utf-8")


def _fmt_sources(sources: Iterable[Source]) -> str:
    order = list(Source)
    return ",".join(s.value for s in sorted(sources, key=order.index))


def dump_codemap(codemap: CodeMap) -> str:
    """Canonical text form; ``parse_codemap(dump_codemap(m)) == m``."""
    lines = []
    for rule in codemap.categories:
        head = ["category", rule.category_name]
        if rule.category_name in codemap.outcome_categories:
            head.append("outcome")
        if rule.source_filter is not None:
            head.append("source=" + _fmt_sources(rule.source_filter))
        if rule.single_sources:
            head.append("single=" + _fmt_sources(rule.single_sources))
        if rule.min_claims != 1:
            head.append(f"claims={rule.min_claims}")
        if rule.min_separation_days != 0:
            head.append(f"sep={rule.min_separation_days}")
        if rule.within_days != DEFAULT_WITHIN_DAYS:
            head.append(f"within={rule.within_days}")
        lines.append(" ".join(head))
        run_system, run = None, []
        for p in list(rule.patterns) + [None]:
            if p is None or p.system != run_system:
                if run:
                    lines.append(f"  {_SYSTEM_FILE_NAMES[run_system]}: " + ", ".join(run))
                if p is None:
                    break
                run_system, run = p.system, []
            run.append(str(p))
    return "\n".join(lines) + "\n"
