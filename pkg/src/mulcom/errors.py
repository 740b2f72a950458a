"""Exception types shared across the package."""


class MulComError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(MulComError, ValueError):
    """Tensor extents do not conform for the requested operation."""


class ConfigError(MulComError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ValidationError(MulComError, ValueError):
    """Input data violates a documented invariant."""


class EmptyDocumentError(MulComError, ValueError):
    """A document has no content for the requested stream."""


class DataFormatError(MulComError, ValueError):
    """An on-disk record could not be parsed.

    `path` and `line` locate the offending record when known.
    """

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f" ({path}" + (f":{line}" if line is not None else "") + ")"
        super().__init__(message + loc)
        self.path = path
        self.line = line
