"""Exception types shared across the package.

The CLI maps these onto exit codes (see ``scatterpos.cli``).
"""


class ScatterposError(Exception):
    """Base class for all package errors."""


class ArgumentError(ScatterposError, ValueError):
    """Invalid argument combination or out-of-range option."""


class DomainError(ScatterposError, ValueError):
    """A physical quantity is outside its admissible domain."""


class ShapeError(ScatterposError, ValueError):
    """Array or tensor extents are incompatible."""


class NumericalError(ScatterposError, ArithmeticError):
    """NaN/Inf appeared where finite values are required."""


class SingularityError(NumericalError):
    """A denominator vanished at some frequency index."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class NoSolutionError(NumericalError):
    """Inversion residual exceeded the rejection threshold."""


class IntegrityError(ScatterposError):
    """Stored content does not match its recorded digest or size."""


class FormatVersionError(IntegrityError):
    """Stored artifact has an unsupported format version or kind."""
