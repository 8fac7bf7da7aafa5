"""Exception hierarchy shared by the library and the CLI."""


class TrmError(Exception):
    """Base class for all errors raised by eegtrm."""


class ValidationError(TrmError, ValueError):
    """Bad input: malformed file, shape mismatch, out-of-range value."""


class NumericalError(TrmError, ArithmeticError):
    """A NaN or Inf showed up during a forward or backward pass."""
