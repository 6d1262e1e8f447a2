"""Exception hierarchy for the psyche engine.

Every failure mode the engine can report has its own class so callers can
match on behaviour rather than message text. Parse errors always carry the
raw model completion that failed to parse.
"""

from __future__ import annotations


class PsycheError(Exception):
    """Base class for all engine errors."""


class PreconditionError(PsycheError, ValueError):
    """An operation was called with inputs that violate its contract."""


class SizingError(PreconditionError):
    """A rendered prompt exceeds the backend's context budget."""


class BackendError(PsycheError):
    """Base class for transport-level failures."""


class RetriesExhaustedError(BackendError):
    """All retry attempts for a request failed."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class ProtocolError(BackendError):
    """The backend answered, but not in the expected wire format."""


class FixtureError(PsycheError):
    """Base class for mock-backend fixture violations."""


class FixtureOrderError(FixtureError):
    """A call arrived for a stage other than the head fixture's stage."""

    def __init__(self, expected: str, got: str):
        super().__init__(f"fixture order violated: expected stage {expected!r}, got {got!r}")
        self.expected = expected
        self.got = got


class FixtureExhaustedError(FixtureError):
    """More calls were issued than fixtures were loaded."""


class TemplateError(PsycheError):
    """A prompt template is missing a binding or left a placeholder unresolved."""


class ParseError(PsycheError):
    """A model completion could not be parsed; carries the raw text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class PatternParseError(ParseError):
    """Pattern extraction did not yield the required number of patterns."""


class RuleParseError(ParseError):
    """Rule summarization did not yield the required typed rules."""


class KeyPointParseError(ParseError):
    """Key-point generation yielded no usable items."""


class ScriptParseError(ParseError):
    """Script generation did not yield contiguously numbered steps."""


class ExecutionParseError(ParseError):
    """Script execution yielded no recognizable per-step answers."""


class MergedParseError(ParseError):
    """The merged-mode completion is missing a section or has them out of order."""


class ExtractionError(ParseError):
    """No answer could be extracted from a completion."""


class AnswerMissingError(ParseError):
    """The answering stage completed but no answer could be extracted."""


class PartialAttemptsError(PsycheError):
    """Fewer reasoning paths were obtained than requested; carries what was obtained."""

    def __init__(self, message: str, paths):
        super().__init__(message)
        self.paths = list(paths)


class StageFailure(PsycheError):
    """Wraps a stage error with the stage label where it happened."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class LedgerInvariantError(PsycheError):
    """A completed record's call count does not match its mode's budget."""


class ConsistencyCheckError(PsycheError):
    """The EM = PM + RM decomposition cross-check failed; lists offending items."""

    def __init__(self, message: str, offending):
        super().__init__(message)
        self.offending = list(offending)


class CompletenessError(PsycheError):
    """A record is missing a section required for the requested export stage."""


class TrainingSampleParseError(ParseError):
    """A training-sample text violates the section-delimiter format."""

    def __init__(self, message: str, position: int, raw: str = ""):
        super().__init__(f"{message} (line {position})", raw)
        self.position = position


class NothingToExportError(PsycheError):
    """The record store has no records at or above the requested review status."""


class SplitViolationError(PsycheError):
    """A question id that belongs to the test split leaked into a training artifact."""


class SchemaError(PsycheError):
    """A persisted file carries an unknown or incompatible schema version."""


class InputError(PsycheError):
    """An operator-supplied input file is missing, empty, or malformed."""
