"""Exception hierarchy shared by every bigran module."""


class BigranError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ContractError(BigranError, ValueError):
    """A precondition of an operation was violated (shapes, ranges, ids)."""

    exit_code = 3


class ConfigError(BigranError, ValueError):
    """Invalid or unknown configuration values."""

    exit_code = 3


class FormatError(BigranError, ValueError):
    """A binary artifact failed validation (magic, length, checksum, values)."""

    exit_code = 4


class NumericalError(BigranError, ArithmeticError):
    """Training or scoring produced non-finite values."""

    exit_code = 5
