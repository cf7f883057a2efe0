"""Exception hierarchy shared across the package."""


class FwdSmoothError(Exception):
    """Base class for all errors raised by fwdsmooth."""


class ParameterDomainError(FwdSmoothError, ValueError):
    """A parameter value lies outside the model's admissible set."""


class DegenerateWeightsError(FwdSmoothError, FloatingPointError):
    """Every importance weight underflowed to zero."""


class DegenerateBackwardKernelError(FwdSmoothError, FloatingPointError):
    """A backward-kernel normaliser is numerically zero for some particle."""


class LambdaDomainError(FwdSmoothError, ValueError):
    """Summary statistics fall outside the domain of the M-step map."""


class CapacityError(FwdSmoothError, MemoryError):
    """A requested exact computation exceeds its size guard."""


class NumericalError(FwdSmoothError, ArithmeticError):
    """A linear solve or quadrature failed to produce a trustworthy value."""
