"""Exception types shared across the package."""


class QamoeError(Exception):
    """Base class for all package errors."""


class ValidationError(QamoeError):
    """Rejected input: bad dimensions, out-of-range values, unknown config keys."""


class FormatError(QamoeError):
    """Malformed binary file. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(QamoeError):
    """File format version is newer than this code understands."""

    def __init__(self, found, supported):
        super().__init__(f"file format version {found} not supported (supported: {supported})")
        self.found = found
        self.supported = supported


class UndefinedMetricError(QamoeError):
    """Metric has no defined value for this input (e.g. zero-variance correlation)."""


class TrainingDivergenceError(QamoeError):
    """Non-finite gradients survived clipping; the run is aborted."""


class OracleError(QamoeError):
    """The finite-difference oracle hit a non-finite function evaluation."""
