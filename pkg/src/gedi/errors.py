"""Exception hierarchy shared by every module.

The CLI maps the three top-level families onto exit codes:
``ConfigError`` -> 1, ``DataError`` -> 2, ``NumericalError`` -> 3.
"""


class GediError(Exception):
    """Base class for all package errors."""


class ConfigError(GediError, ValueError):
    """A configuration value is outside its documented bounds."""


class DataError(GediError):
    """Bad input data: unknown ids, malformed files, mismatched models."""


class ClassOutOfRangeError(DataError, IndexError):
    pass


class TokenOutOfRangeError(DataError, IndexError):
    pass


class VocabMismatchError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class FormatVersionError(DataError):
    pass


class NumericalError(GediError, ArithmeticError):
    """Non-finite intermediate values or a diverging optimisation."""


class DegenerateDistributionError(NumericalError):
    """Every candidate token ended up with zero probability."""


class ContractViolation(GediError, ValueError):
    """A caller broke a documented precondition."""


class InvariantViolation(GediError, AssertionError):
    """A recorded trace contradicts an invariant the engine guarantees."""
