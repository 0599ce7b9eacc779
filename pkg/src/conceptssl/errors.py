"""Exception hierarchy shared by every module."""


class ConceptSSLError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ConceptSSLError, ValueError):
    pass


class DegenerateInputError(ConceptSSLError, ValueError):
    """Input has no meaningful direction (zero vector, empty mean, ...)."""


class NumericalFailureError(ConceptSSLError, ArithmeticError):
    pass


class ParseError(ConceptSSLError, ValueError):
    """A file could not be parsed; carries the line or byte offset."""

    def __init__(self, message, *, line=None, offset=None):
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (offset {offset})"
        super().__init__(message + where)
        self.line = line
        self.offset = offset


class FormatError(ConceptSSLError, ValueError):
    """A file parsed but its contents are inconsistent or of the wrong kind."""


class GenerationError(ConceptSSLError, RuntimeError):
    pass


class ConfigError(ConceptSSLError, ValueError):
    def __init__(self, key, location, message):
        super().__init__(f"{key} ({location}): {message}")
        self.key = key
        self.location = location
