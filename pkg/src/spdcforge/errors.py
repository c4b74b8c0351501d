"""Exception hierarchy shared by all spdcforge modules."""


class SpdcError(Exception):
    """Base class for every error raised by spdcforge."""


class DomainError(SpdcError, ValueError):
    """Argument outside the region where a formula is defined."""


class ConfigError(SpdcError, ValueError):
    pass


class CalibrationMissing(SpdcError, KeyError):
    pass


class OutOfActiveArea(SpdcError, ValueError):
    pass


class ParseError(SpdcError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class OrderError(SpdcError, ValueError):
    pass


class FitError(SpdcError, RuntimeError):
    pass


class DegenerateGeometry(SpdcError, ValueError):
    pass


class IntegrationError(SpdcError, RuntimeError):
    pass


class SpdcIOError(SpdcError, OSError):
    pass
