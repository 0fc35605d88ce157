"""Limiting dynamics of SGD near a manifold of minimisers.

Closed-form derivatives of the gradient-flow projection, simulators for SGD
and for its slow-time limit, and the sparse-recovery and k-phase motor
experiments built on them.
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .errors import (
    CertificateWarning,
    DegenerateDataError,
    DivergenceError,
    DomainError,
    NonConvergedError,
    NotOnManifoldError,
    NotPSDError,
    NumericalFailure,
    SgdLimitError,
    SymmetryError,
)

__all__ = [
    "__version__",
    "CertificateWarning",
    "DegenerateDataError",
    "DivergenceError",
    "DomainError",
    "NonConvergedError",
    "NotOnManifoldError",
    "NotPSDError",
    "NumericalFailure",
    "SgdLimitError",
    "SymmetryError",
]
