"""Shared exception types."""


class ShapeError(ValueError):
    """An input had the wrong dimensions or an inconsistent shape."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or diverged."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class FormatError(ValueError):
    """A file did not match its declared on-disk format."""

    def __init__(self, message, line=None, offset=None):
        detail = message
        if line is not None:
            detail += f" (line {line})"
        if offset is not None:
            detail += f" (byte offset {offset})"
        super().__init__(detail)
        self.line = line
        self.offset = offset
