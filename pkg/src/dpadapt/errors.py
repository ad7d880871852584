"""Exception types shared across the package."""


class DpAdaptError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DpAdaptError):
    """An array does not have the shape a contract requires."""


class NumericError(DpAdaptError):
    """Non-finite values or other numeric breakdown."""


class ConfigError(DpAdaptError):
    """Invalid configuration: bad value, unknown key, incompatible inputs."""


class ParseError(DpAdaptError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
