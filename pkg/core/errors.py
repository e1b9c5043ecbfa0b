from typing import Iterable, List, Optional


class LfmmiError(Exception):
    """Root of every error raised by the toolkit."""

    exit_code = 1


class InvalidArgumentError(LfmmiError, ValueError):
    exit_code = 2


class ConfigError(LfmmiError):
    """Configuration failed validation; ``fields`` lists every violation."""

    exit_code = 2

    def __init__(self, message: str, fields: Optional[Iterable[str]] = None):
        super().__init__(message)
        self.fields: List[str] = list(fields or [])


class InfeasibleSupervisionError(LfmmiError):
    """Utterance is too short for the minimum path of its numerator graph."""

    exit_code = 4


class InfeasibleGraphError(LfmmiError):
    """No complete path of the requested length exists in a graph."""

    exit_code = 4


class NonFiniteGradientError(LfmmiError):
    exit_code = 4

    def __init__(self, message: str, offending: Optional[dict] = None):
        super().__init__(message)
        self.offending = dict(offending or {})


class DivergenceError(LfmmiError):
    """Adaptation loss became non-finite; ``last_adapter`` is the last finite state."""

    exit_code = 4

    def __init__(self, message: str, last_adapter=None):
        super().__init__(message)
        self.last_adapter = last_adapter


class TapeConsumedError(LfmmiError):
    exit_code = 4


class FormatError(LfmmiError):
    exit_code = 3


class BadMagicError(FormatError):
    pass


class CorruptArchiveError(FormatError):
    pass


class MissingRecordError(FormatError):
    def __init__(self, message: str, record_id: str):
        super().__init__(message)
        self.record_id = record_id


class ScoringError(LfmmiError):
    exit_code = 3

    def __init__(self, message: str, missing_ids: Optional[Iterable[str]] = None):
        super().__init__(message)
        self.missing_ids = sorted(missing_ids or [])
