"""Exception taxonomy for qdetect.

Every error raised by the package derives from QdetectError so callers can
catch the whole family at the CLI boundary.  Parse failures are split into
distinct subclasses (magic, version, truncation) because file-format
diagnostics need to name exactly what went wrong.
"""


class QdetectError(Exception):
    """Base class for all qdetect errors."""


class ConfigurationError(QdetectError):
    """A config value violates an invariant (bad shape, out-of-range field)."""


class LabelingError(QdetectError):
    """A state label is inconsistent with the ion count it describes."""


class ClassificationError(QdetectError):
    """A model was applied to data whose dimensions it cannot accept."""


class CalibrationError(QdetectError):
    """Threshold calibration was given an unusable population."""


class TrainingError(QdetectError):
    """Training diverged or was misconfigured; carries the epoch index."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class EquivalenceError(QdetectError):
    """A compiled truth table disagrees with the reference arithmetic."""

    def __init__(self, message: str, coordinates: tuple | None = None):
        super().__init__(message)
        self.coordinates = coordinates


class EvaluationError(QdetectError):
    """A fidelity quantity is undefined (e.g. an empty prepared class)."""


class TraceError(QdetectError):
    """A timing trace is missing events required by a report."""


class UsageError(QdetectError):
    """Mismatched operand formats or otherwise invalid API usage."""


class PipelineError(QdetectError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class ParseError(QdetectError):
    """Base class for binary/text artifact parsing failures."""


class FormatMagicError(ParseError):
    """File does not start with the expected magic bytes."""

    def __init__(self, expected: bytes, found: bytes):
        super().__init__(
            f"bad magic: expected {expected!r}, found {found!r}"
        )
        self.expected = expected
        self.found = found


class FormatVersionError(ParseError):
    """File declares a format version this build cannot read."""

    def __init__(self, expected: int, found: int):
        super().__init__(
            f"unsupported format version {found} (this build reads {expected})"
        )
        self.expected = expected
        self.found = found


class TruncatedFileError(ParseError):
    """File ended before the payload its header declares."""
