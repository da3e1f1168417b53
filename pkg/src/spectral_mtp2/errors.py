"""Exception hierarchy.

Every library error derives from :class:`SpectralMTP2Error`. The CLI maps
:class:`NumericalError` subclasses to exit code 2 and everything else
(bad input, bad flags) to exit code 1.
"""


class SpectralMTP2Error(Exception):
    """Base class for all errors raised by this package."""


class InputError(SpectralMTP2Error, ValueError):
    """Malformed or inconsistent input."""


class DimMismatch(InputError):
    pass


class InvalidEdge(InputError):
    pass


class InvalidParams(InputError):
    pass


class EtaOutOfRange(InputError):
    pass


class NumericalError(SpectralMTP2Error, ArithmeticError):
    """A computation failed for numerical reasons."""


class NotPositiveDefinite(NumericalError):
    pass


class NotMMatrix(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class Disconnected(NumericalError):
    pass


class NoFeasibleEdge(NumericalError):
    def __init__(self, message, step=None, phi_upper=None, phi_lower=None):
        super().__init__(message)
        self.step = step
        self.phi_upper = phi_upper
        self.phi_lower = phi_lower


class InfeasibleSupport(NumericalError):
    pass


class NotOptimal(NumericalError):
    pass
