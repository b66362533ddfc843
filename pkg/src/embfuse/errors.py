"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
data problems exit 3 and numeric failures exit 4.
"""


class EmbfuseError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EmbfuseError, ValueError):
    """Invalid configuration value (tau <= 0, lambda_f outside [0, 1], ...)."""


class DataError(EmbfuseError, ValueError):
    """Input data is empty, malformed or inconsistent."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(EmbfuseError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class DegenerateVectorError(EmbfuseError, ValueError):
    """A vector with (near) zero L2 norm was used where a direction is needed."""


class ContractError(EmbfuseError, RuntimeError):
    """An API precondition was violated by the caller."""


class TokenLookupError(EmbfuseError, KeyError):
    """Token id or token string is not part of the vocabulary."""


class NumericError(EmbfuseError, FloatingPointError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)
