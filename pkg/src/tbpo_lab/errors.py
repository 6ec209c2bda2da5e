"""Exception hierarchy shared by every module."""


class TbpoError(Exception):
    """Base class for all library errors."""


class DomainError(TbpoError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigError(TbpoError, ValueError):
    """An experiment or object configuration is invalid."""


class NumericError(TbpoError, ArithmeticError):
    """A computation produced a non-finite or diverging value."""

    def __init__(self, message, step=None, pair_index=None):
        super().__init__(message)
        self.step = step
        self.pair_index = pair_index
