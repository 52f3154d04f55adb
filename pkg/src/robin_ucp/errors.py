"""Exception hierarchy shared by the workbench modules."""


class WorkbenchError(Exception):
    """Base class for all errors raised by robin_ucp."""


class DomainError(WorkbenchError, ValueError):
    """A point was evaluated outside the closed domain of a field."""


class EllipticityError(WorkbenchError, ValueError):
    """A coefficient sample is non-symmetric or not positive definite."""


class QuadratureError(WorkbenchError, ArithmeticError):
    """Non-finite integrand samples or a rule that failed to converge."""


class DegenerateHeightError(WorkbenchError, ArithmeticError):
    """The weighted height H(r) is too small to form a frequency quotient."""


class ResidualError(WorkbenchError, ValueError):
    """The supplied function does not solve the Robin problem to tolerance."""


class ManufactureError(WorkbenchError, ValueError):
    """A manufactured solution is too close to zero to divide by."""


class MapError(WorkbenchError, ArithmeticError):
    """Flattening-map construction or inversion failed."""


class SingularSystemError(WorkbenchError, ArithmeticError):
    """The finite-element system matrix is singular."""


class NotApplicableError(WorkbenchError, ValueError):
    """A check's precondition does not hold for the given input."""
