"""First and second derivatives of the limit map Phi at points of the manifold.

The closed forms only need the Hessian, its pseudo-inverse, the Lyapunov
inverse and the third-derivative contraction of the loss. The ``*_fd``
functions differentiate :func:`gradient_flow.phi_limit` numerically and share
nothing with the closed forms except the loss gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotOnManifoldError
from .gradient_flow import FlowConfig, on_manifold, phi_limit
from .linalg_core import (
    DEFAULT_REL_TOL,
    kernel_projection,
    lyapunov_inverse,
    pseudo_inverse,
    spectral_decompose,
)

# Sigma_perp comes out of a numerical projector, so membership in W_H is
# checked more loosely than linalg_core's default.
LYAPUNOV_DOMAIN_TOL = 1e-6
DEFAULT_GRAD_TOL = 1e-7


@dataclass(frozen=True)
class NoiseSplit:
    P: np.ndarray
    sigma_par: np.ndarray
    sigma_perp: np.ndarray
    sigma_cross: np.ndarray  # (I - P) Sigma P

    @property
    def sigma_cross_t(self) -> np.ndarray:
        return self.sigma_cross.T

    def reconstruct(self) -> np.ndarray:
        return self.sigma_par + self.sigma_perp + self.sigma_cross + self.sigma_cross.T


@dataclass(frozen=True)
class LocalGeometry:
    """Hessian-derived quantities at one manifold point."""

    x: np.ndarray
    hessian: np.ndarray
    dec: object
    P: np.ndarray
    H_pinv: np.ndarray


def local_geometry(loss, x, grad_tol=DEFAULT_GRAD_TOL, rel_tol=DEFAULT_REL_TOL, check=True):
    """Hessian, tangent projector and pseudo-inverse at ``x``.

    With ``check=False`` the point may sit slightly off the manifold; the
    decomposition then keeps exactly ``loss.manifold_rank`` eigenvalues.
    """
    x = np.asarray(x, dtype=float)
    if check:
        chk = on_manifold(loss, x, grad_tol, rel_tol)
        if not chk:
            raise NotOnManifoldError(f"point is not on the manifold: {chk.reason}", chk)
    H = loss.hessian(x)
    dec = spectral_decompose(H, rel_tol) if check else spectral_decompose(H, rank=loss.manifold_rank)
    return LocalGeometry(x, H, dec, kernel_projection(dec), pseudo_inverse(dec))


def dphi(loss, x, grad_tol=DEFAULT_GRAD_TOL, rel_tol=DEFAULT_REL_TOL) -> np.ndarray:
    """Jacobian of Phi on the manifold: the projector onto ker of the Hessian."""
    return local_geometry(loss, x, grad_tol, rel_tol).P


def _split(P, Sigma):
    Sigma = np.asarray(Sigma, dtype=float)
    N = np.eye(P.shape[0]) - P
    return NoiseSplit(P, P @ Sigma @ P, N @ Sigma @ N, N @ Sigma @ P)


def split_noise(loss, x, Sigma, grad_tol=DEFAULT_GRAD_TOL) -> NoiseSplit:
    return _split(dphi(loss, x, grad_tol), Sigma)


def normal_lyapunov(dec, split: NoiseSplit, Sigma) -> np.ndarray:
    """``Lyap^{-1}(Sigma_perp)``, treating a rounding-level ``Sigma_perp`` as zero.

    A purely tangent ``Sigma`` leaves ``Sigma_perp`` at round-off size, where
    the relative domain check would be meaningless.
    """
    sp = 0.5 * (split.sigma_perp + split.sigma_perp.T)
    if np.linalg.norm(sp) <= 1e-13 * max(float(np.linalg.norm(Sigma)), np.finfo(float).tiny):
        return np.zeros_like(sp)
    return lyapunov_inverse(dec, sp, LYAPUNOV_DOMAIN_TOL)


def d2phi_terms(loss, geo: LocalGeometry, Sigma):
    """The three pieces of ``d^2 Phi[Sigma]`` as a tuple (tangent, normal, mixed).

    tangent = -H^+ T[Sigma_par]
    normal  = -P T[Lyap^{-1}(Sigma_perp)]
    mixed   = -2 P T[H^+ Sigma_cross]
    where ``T[A]`` is the third-derivative contraction of the loss.
    """
    s = _split(geo.P, Sigma)
    x = geo.x
    tangent = -geo.H_pinv @ loss.third_contraction(x, s.sigma_par)
    lyap = normal_lyapunov(geo.dec, s, Sigma)
    normal = -geo.P @ loss.third_contraction(x, lyap)
    B = geo.H_pinv @ s.sigma_cross
    mixed = -2.0 * geo.P @ loss.third_contraction(x, 0.5 * (B + B.T))
    return tangent, normal, mixed


def d2phi_contract(loss, x, Sigma, grad_tol=DEFAULT_GRAD_TOL) -> np.ndarray:
    """``sum_ij d_i d_j Phi(x) Sigma_ij`` for ``x`` on the manifold."""
    geo = local_geometry(loss, x, grad_tol)
    return sum(d2phi_terms(loss, geo, Sigma))


def oracle_flow_config(h: float) -> FlowConfig:
    return FlowConfig(atol=1e-13, rtol=1e-12, grad_stop=min(h**3, 1e-13))


def dphi_fd(loss, x, h: float = 1e-3, cfg: FlowConfig | None = None) -> np.ndarray:
    """Central-difference Jacobian of Phi, one column per coordinate."""
    x = np.asarray(x, dtype=float)
    cfg = cfg or oracle_flow_config(h)
    D = x.size
    J = np.empty((D, D))
    for j in range(D):
        e = np.zeros(D)
        e[j] = h
        J[:, j] = (phi_limit(loss, x + e, cfg) - phi_limit(loss, x - e, cfg)) / (2 * h)
    return J


def d2phi_fd(loss, x, Sigma, h: float = 1e-3, cfg: FlowConfig | None = None) -> np.ndarray:
    """Second-difference estimate of ``d^2 Phi[Sigma]`` with Richardson extrapolation.

    Only eigen-directions of ``Sigma`` with ``|mu| > 1e-12 ||Sigma||`` are
    probed, each with the stencil ``x +- h q, x +- h q / 2``.
    """
    x = np.asarray(x, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    cfg = cfg or oracle_flow_config(h / 2)
    mu, Q = np.linalg.eigh(0.5 * (Sigma + Sigma.T))
    keep = np.abs(mu) > 1e-12 * max(np.linalg.norm(Sigma), np.finfo(float).tiny)
    out = np.zeros_like(x)
    if not np.any(keep):
        return out
    center = phi_limit(loss, x, cfg)
    for m, q in zip(mu[keep], Q[:, keep].T):
        coarse = (phi_limit(loss, x + h * q, cfg) - 2 * center + phi_limit(loss, x - h * q, cfg)) / h**2
        hh = h / 2
        fine = (phi_limit(loss, x + hh * q, cfg) - 2 * center + phi_limit(loss, x - hh * q, cfg)) / hh**2
        out += m * (4.0 * fine - coarse) / 3.0
    return out


def grad_trace_hessian(loss, x) -> np.ndarray:
    """Gradient of ``tr Hess L``, i.e. the contraction with the identity."""
    x = np.asarray(x, dtype=float)
    return loss.third_contraction(x, np.eye(x.size))


# ---------------------------------------------------------------------------
# derivative gate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateCheck:
    model: str
    point: int
    check: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)


def _random_psd(rng, D):
    A = rng.standard_normal((D, D))
    return A @ A.T / D


def _relative(a, b) -> float:
    scale = max(float(np.linalg.norm(b)), float(np.linalg.norm(a)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


def gate_points(loss, n_points: int, rng, model: str, h: float) -> list:
    """Manifold points for the gate: flow endpoints from random starts (OLM)
    or evenly spaced circle points (motor)."""
    if model == "motor":
        return [loss.circle_point(2 * np.pi * k / n_points + 0.1) for k in range(n_points)]
    cfg = oracle_flow_config(h / 2)
    pts = []
    while len(pts) < n_points:
        x0 = rng.uniform(0.5, 1.5, loss.dim) * rng.choice([-1.0, 1.0], loss.dim)
        pts.append(phi_limit(loss, x0, cfg))
    return pts


def derivative_gate(
    n_points: int = 5,
    h: float = 1e-3,
    tol_first: float = 1e-4,
    tol_second: float = 1e-3,
    seed: int = 0,
    motor_dim: int = 5,
) -> list:
    """Closed-form first and second derivatives of Phi against the FD oracles.

    Runs on OLM with ``n=2, d=3`` and on the motor of dimension
    ``motor_dim``. First order is scored by the largest entry of
    ``dphi - dphi_fd``; second order by the relative Euclidean error of
    ``d2phi_contract`` against ``d2phi_fd`` for a random PSD ``Sigma``
    (and, on the motor, also for the motor noise covariance).
    """
    from .loss_models import MotorProblem, olm_generate

    rng = np.random.default_rng(seed)
    models = [("olm", olm_generate(2, 3, 1, seed=seed)), ("motor", MotorProblem(motor_dim))]
    out = []
    for name, loss in models:
        for k, x in enumerate(gate_points(loss, n_points, rng, name, h)):
            J = dphi(loss, x)
            err1 = float(np.max(np.abs(J - dphi_fd(loss, x, h))))
            out.append(GateCheck(name, k, "dphi", err1, tol_first))
            sigmas = [("d2phi_random", _random_psd(rng, loss.dim))]
            if name == "motor":
                sigmas.append(("d2phi_motor_noise", np.diag(loss.noise_variances(x))))
            for label, S in sigmas:
                err2 = _relative(d2phi_contract(loss, x, S), d2phi_fd(loss, x, S, h))
                out.append(GateCheck(name, k, label, err2, tol_second))
    return out
