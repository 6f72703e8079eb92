"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (numeric abort = 1, config = 2,
data = 3), so new exceptions should subclass one of the roots below.
"""


class ContractViolation(ValueError):
    """An operation was called outside its stated contract (bad shapes,
    out-of-range arguments, non-scalar loss, unknown version, ...)."""


class NumericError(ArithmeticError):
    """A forward pass produced a non-finite value, or training hit a
    non-finite loss."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Bad input data (corpus files, QA files, split violations)."""


class ParseError(DataError):
    """A data file failed to parse; message carries the line number."""
