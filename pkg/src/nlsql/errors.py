"""Exception types shared across the pipeline."""

from __future__ import annotations


class NlsqlError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NlsqlError):
    """Bad configuration: unknown database id, missing role binding, invalid rates."""


class StateMachineError(NlsqlError):
    """Illegal pipeline stage transition. Indicates a programming bug, not user input."""


class TransportError(NlsqlError):
    """A backend could not be reached or timed out. Retryable."""


class ProtocolError(NlsqlError):
    """A backend answered with something the client cannot interpret."""


class GenerationError(NlsqlError):
    """The generator produced no usable text (for example an empty completion)."""


class PlanParseError(NlsqlError):
    """The decomposition plan text could not be parsed or violates plan invariants.

    Carries the raw backend text and the path of the offending field so the
    re-prompt loop can show the model exactly what went wrong.
    """

    def __init__(self, message: str, *, raw_text: str = "", field_path: str = ""):
        super().__init__(message)
        self.raw_text = raw_text
        self.field_path = field_path


class ExtractionError(NlsqlError):
    """The database could not be introspected (missing, unreadable or corrupt file)."""


class MeasurementError(NlsqlError):
    """Runtime measurement aborted because the query stopped executing cleanly."""


class DatasetError(NlsqlError):
    """A benchmark task file is missing, malformed or incomplete."""
