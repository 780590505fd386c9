"""Exception hierarchy.

Every error raised on bad *input* derives from :class:`ValidationError`; the
CLI maps those to exit code 1 and anything else to exit code 2.
"""

from __future__ import annotations


class FlexCohortError(Exception):
    """Base class for all package errors."""


class ValidationError(FlexCohortError, ValueError):
    """Input violates a documented contract."""


# codemap
class EmptyCode(ValidationError):
    pass


class IllegalCharacter(ValidationError):
    pass


class MalformedRange(ValidationError):
    pass


class UnsortedInput(ValidationError):
    pass


class CodemapParseError(ValidationError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class DuplicateCategory(CodemapParseError):
    pass


class UnknownCategory(ValidationError):
    pass


# events
class SchemaError(ValidationError):
    def __init__(self, message: str, row: int | None = None):
        where = f"row {row}: " if row is not None else ""
        super().__init__(where + message)
        self.row = row


class OrphanEvent(SchemaError):
    def __init__(self, person_id: str, row: int | None = None):
        super().__init__(f"event references unknown person {person_id!r}", row)
        self.person_id = person_id


class BadDate(SchemaError):
    pass


class UnknownPerson(ValidationError, KeyError):
    pass


# synth
class InvalidConfig(ValidationError):
    pass


# featurize
class CohortStoreMismatch(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class EmptyMatrix(ValidationError):
    pass


# preprocess / models / evaluation
class DegenerateColumn(ValidationError):
    pass


class SingleClass(ValidationError):
    pass


class TooSmall(ValidationError):
    pass


class Singular(ValidationError):
    pass


class ColumnMismatch(ValidationError):
    pass


# pipeline
class TestSetAccessError(FlexCohortError):
    """A sealed test set was read more than once."""

    __test__ = False  # keep pytest from collecting this as a test class
