"""Spectral linear algebra on small dense symmetric matrices.

Everything here goes through one eigendecomposition with a relative rank
cutoff, so pseudo-inverses, kernel projectors and the Lyapunov inverse all
agree on which eigenvalues count as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NotPSDError, SymmetryError

DEFAULT_REL_TOL = 1e-8
SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenpairs of a symmetric matrix, eigenvalues ascending.

    ``cutoff`` is absolute; eigenvalues with ``|lam| <= cutoff`` are treated
    as exact zeros by every consumer of the decomposition.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    rank: int
    cutoff: float

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def nonzero(self) -> np.ndarray:
        """Boolean mask of the above-cutoff eigenvalues."""
        return np.abs(self.eigenvalues) > self.cutoff

    def reconstruct(self) -> np.ndarray:
        V = self.eigenvectors
        return (V * self.eigenvalues) @ V.T


def spectral_decompose(
    H, rel_tol: float = DEFAULT_REL_TOL, rank: int | None = None
) -> SpectralDecomposition:
    """Eigendecompose a symmetric matrix and fix its numerical rank.

    By default the cutoff is ``rel_tol * max|lam|``. Passing ``rank`` instead
    keeps exactly the ``rank`` eigenvalues of largest magnitude, which is how
    callers impose a known rank slightly off the manifold.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise SymmetryError(f"expected a square matrix, got shape {H.shape}")
    asym = np.max(np.abs(H - H.T)) if H.size else 0.0
    scale = max(1.0, np.max(np.abs(H))) if H.size else 1.0
    if asym > SYMMETRY_TOL * scale:
        raise SymmetryError(f"matrix asymmetry {asym:.3e} exceeds tolerance")
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    if rank is not None:
        if not 0 <= rank <= lam.size:
            raise ValueError(f"rank {rank} out of range for dimension {lam.size}")
        mags = np.sort(np.abs(lam))[::-1]
        cutoff = float(mags[rank]) if rank < lam.size else 0.0
        if rank and mags[rank - 1] <= cutoff:
            raise ValueError("requested rank splits a repeated eigenvalue")
        return SpectralDecomposition(lam, V, rank, cutoff)
    top = np.max(np.abs(lam)) if lam.size else 0.0
    cutoff = rel_tol * top
    rank = int(np.count_nonzero(np.abs(lam) > cutoff))
    return SpectralDecomposition(lam, V, rank, float(cutoff))


def _check_psd(dec: SpectralDecomposition) -> None:
    if dec.eigenvalues.size and dec.eigenvalues[0] < -dec.cutoff:
        raise NotPSDError(
            f"smallest eigenvalue {dec.eigenvalues[0]:.3e} is below -cutoff {dec.cutoff:.3e}"
        )


def pseudo_inverse(dec: SpectralDecomposition) -> np.ndarray:
    mask = dec.nonzero
    V = dec.eigenvectors[:, mask]
    return (V / dec.eigenvalues[mask]) @ V.T


def range_projection(dec: SpectralDecomposition) -> np.ndarray:
    """Orthogonal projector ``A A^+`` onto the range of the matrix."""
    V = dec.eigenvectors[:, dec.nonzero]
    return V @ V.T


def kernel_projection(dec: SpectralDecomposition) -> np.ndarray:
    """Orthogonal projector ``I - A A^+`` onto the (numerical) kernel.

    At a minimiser on the manifold this is the tangent projector.
    """
    _check_psd(dec)
    V = dec.eigenvectors[:, ~dec.nonzero]
    return V @ V.T


def in_lyapunov_domain(dec: SpectralDecomposition, Sigma, rel_tol: float = 1e-8) -> bool:
    Sigma = np.asarray(Sigma, dtype=float)
    P = range_projection(dec)
    scale = max(np.linalg.norm(Sigma), np.finfo(float).tiny)
    left = np.linalg.norm(P @ Sigma - Sigma)
    right = np.linalg.norm(Sigma @ P - Sigma)
    return max(left, right) <= rel_tol * scale


def lyapunov_inverse(dec: SpectralDecomposition, Sigma, rel_tol: float = 1e-8) -> np.ndarray:
    """Solve ``H X + X H = Sigma`` for ``X`` supported on the range of ``H``.

    Parameters
    ----------
    dec : SpectralDecomposition
        Decomposition of the symmetric matrix ``H``.
    Sigma : (D, D) array_like
        Symmetric right-hand side; must satisfy ``H H^+ Sigma = Sigma = Sigma H H^+``.
    rel_tol : float
        Relative tolerance for that membership test.

    Raises
    ------
    DomainError
        If ``Sigma`` has mass outside the range of ``H``. Project it first.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    if np.max(np.abs(Sigma - Sigma.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.max(np.abs(Sigma), initial=0.0)):
        raise SymmetryError("right-hand side must be symmetric")
    if not in_lyapunov_domain(dec, Sigma, rel_tol):
        raise DomainError("Sigma is not supported on the range of H")
    mask = dec.nonzero
    V = dec.eigenvectors[:, mask]
    lam = dec.eigenvalues[mask]
    S = V.T @ Sigma @ V
    X = S / (lam[:, None] + lam[None, :])
    return V @ X @ V.T


def lyapunov_operator(H, X) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    return H.T @ X + X @ H


def pseudo_log_det(dec: SpectralDecomposition) -> float:
    """Log of the product of the above-cutoff eigenvalues."""
    lam = dec.eigenvalues[dec.nonzero]
    if np.any(lam <= 0):
        raise NotPSDError("pseudo-determinant log needs positive nonzero eigenvalues")
    return float(np.sum(np.log(lam)))


def psd_sqrt(dec: SpectralDecomposition) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues under the cutoff are dropped."""
    _check_psd(dec)
    mask = dec.nonzero
    V = dec.eigenvectors[:, mask]
    return (V * np.sqrt(np.clip(dec.eigenvalues[mask], 0.0, None))) @ V.T
