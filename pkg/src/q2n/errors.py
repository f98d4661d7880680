"""Exception hierarchy shared by all q2n modules."""


class Q2NError(Exception):
    """Base class for every error raised by q2n."""


class FormatError(Q2NError):
    """A tensor file does not follow the .q2nt layout (bad magic, header, dtype)."""


class TruncationError(FormatError):
    """Payload length disagrees with the shape announced in the header."""


class DataError(Q2NError):
    """A loaded tensor contains a non-finite element."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DimensionError(Q2NError, ValueError):
    """Operand shapes are incompatible."""


class NumericalError(Q2NError, ArithmeticError):
    """A numerical kernel failed (non-convergence, singular matrix, non-finite result)."""


class ArgumentError(Q2NError, ValueError):
    """An argument violates an operation's precondition."""
