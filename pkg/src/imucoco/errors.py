"""Exception types shared across the package."""


class ImucocoError(Exception):
    """Base class for all package errors."""


class ValidationError(ImucocoError, ValueError):
    """Input violates a documented precondition."""


class ConfigurationError(ValidationError):
    """A configuration value is out of range or malformed."""


class ParseError(ValidationError):
    """A text artifact could not be parsed.

    ``line`` is the 1-based line number where parsing failed, when known.
    """

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class FingerprintError(ValidationError):
    """A loss table, checkpoint, or body do not belong together."""


class CheckpointError(ImucocoError):
    """Checkpoint is corrupt, tampered with, or of an unsupported version."""
