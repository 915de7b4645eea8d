"""Exception types shared across the package."""


class FascicleError(Exception):
    """Base class for all package-specific errors."""


class InvalidModel(FascicleError):
    """A geometry model violates a probability or packing invariant."""


class OutsideWindow(FascicleError):
    """A query point lies outside the realization window."""


class WindowTooSmall(FascicleError):
    """The realization window does not cover the requested region."""


class NegativeEta(FascicleError):
    """Conductivity laws are defined for nonnegative field strength only."""


class RangeExceeded(FascicleError):
    """A field magnitude lies outside the validated range of a law."""


class NonConvergence(FascicleError):
    """An iterative solve hit its iteration cap before reaching tolerance."""


class MaskDegenerate(FascicleError):
    """The conducting region of a rasterized geometry is not connected."""


class OutOfRange(FascicleError):
    """Interpolation was requested outside the tabulated range."""


class NewtonDivergence(FascicleError):
    """A damped Newton solve exhausted its line search."""


class TableRange(FascicleError):
    """A gradient left the range covered by the effective-law table."""


class InsufficientData(FascicleError):
    """Not enough scales or realizations for a convergence assessment."""


class EmptyClass(FascicleError):
    """A class-wise projection received no samples for some class."""


class LambdaTooSmall(FascicleError):
    """The time-transform rate is below the monotonicity bound."""


class UnsupportedTestFunction(FascicleError):
    """A test function does not satisfy the support requirements."""


class StepRejected(FascicleError):
    """A time step violated a configured energy ceiling."""


class ParseError(FascicleError):
    """A configuration file could not be parsed."""


class ValidationError(FascicleError):
    """A configuration file parsed but failed validation."""
