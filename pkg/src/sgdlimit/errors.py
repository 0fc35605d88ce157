"""Exception types shared across the package."""


class SgdLimitError(Exception):
    """Base class for all errors raised by this package."""


class SymmetryError(SgdLimitError, ValueError):
    pass


class NotPSDError(SgdLimitError, ValueError):
    pass


class DomainError(SgdLimitError, ValueError):
    """Input lies outside the domain on which an operator is invertible."""


class DegenerateDataError(SgdLimitError, ValueError):
    pass


class NotOnManifoldError(SgdLimitError, ValueError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class NumericalFailure(SgdLimitError, RuntimeError):
    """Base for failures of an iterative numerical procedure."""


class NonConvergedError(NumericalFailure):
    """Gradient flow hit its time budget before the gradient became small.

    The partial trajectory is kept on ``self.trajectory``.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class DivergenceError(NumericalFailure):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CertificateWarning(UserWarning):
    """Dual certificate for the weighted l1 program could not be verified."""
