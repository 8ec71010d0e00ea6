"""Exception hierarchy shared by all modules."""


class DtJsccError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(DtJsccError, ValueError):
    """Shapes, lengths or indices do not fit together."""


class NumericError(DtJsccError, ArithmeticError):
    """A non-finite value appeared or a numerical routine missed its accuracy target."""


class UsageError(DtJsccError, RuntimeError):
    """An object was used outside its protocol (e.g. a consumed tape)."""


class ParameterError(DtJsccError, ValueError):
    """A scalar parameter is outside its admissible range."""


class DomainError(DtJsccError, ValueError):
    """Input is valid but outside the domain of the requested routine."""


class ConvergenceError(DtJsccError, RuntimeError):
    """An iterative routine hit its iteration cap."""

    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


class CapacityError(DtJsccError, ValueError):
    """An exact enumeration would exceed its state budget."""


class SpecError(DtJsccError, ValueError):
    """A dataset or experiment specification violates its own constraints."""


class FormatError(DtJsccError, ValueError):
    """A file does not follow its declared binary/text format."""

    def __init__(self, message, section=None):
        super().__init__(message)
        self.section = section


class VersionError(FormatError):
    """A checkpoint was written by an incompatible format version."""


class ConfigError(DtJsccError, ValueError):
    """A configuration file or value is malformed."""
