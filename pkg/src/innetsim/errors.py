"""Exception types shared across the package."""


class SimError(Exception):
    """Base class for all package errors."""


class ConfigError(SimError):
    """Invalid configuration or spec values."""


class TraceParseError(SimError):
    """A trace line failed to parse; carries the 1-based line number."""

    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class TraceOrderError(SimError):
    """Timestamps regressed within a trace; carries the offending line."""

    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class ClockError(SimError):
    """An operation observed time running backwards."""


class DomainError(SimError):
    """An argument violated a mathematical precondition."""


class ModelFormatError(SimError):
    """Model file is corrupt, truncated, or of an unsupported version."""


class ModelShapeError(SimError):
    """Model layer dimensions do not compose or exceed safe bounds."""


class TreeFormatError(SimError):
    """Decision tree description is structurally invalid."""
