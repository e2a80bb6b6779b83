"""Exception types shared across the package."""


class PredBranchError(Exception):
    """Base class for all errors raised by predbranch."""


class InvalidArgument(PredBranchError, ValueError):
    pass


class NumericalFailure(PredBranchError, ArithmeticError):
    pass


class FormatError(PredBranchError, ValueError):
    """A file on disk does not match the expected layout or version."""
