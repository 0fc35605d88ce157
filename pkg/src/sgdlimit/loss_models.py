"""Losses with analytic derivatives up to the third-order contraction.

``third_contraction(x, A)`` returns the vector with components
``sum_jk d_i d_j d_k L(x) A_jk``. Only the symmetric part of ``A`` matters.

``gradient`` (and ``value`` for the two case-study models) accept a batch of
points with shape ``(..., D)`` so that ensembles can be stepped together.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateDataError


class LossModel:
    """Twice-differentiable loss on R^D with a manifold of minimisers.

    Subclasses set ``dim`` and ``manifold_rank`` and implement ``value``,
    ``gradient`` and ``hessian``. ``third_contraction`` falls back to
    finite differences of the Hessian.
    """

    dim: int
    manifold_rank: int

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def hessian(self, x):
        raise NotImplementedError

    def third_contraction(self, x, A):
        return fd_third_contraction(self, x, A)

    def evaluate(self, x):
        return self.value(x), self.gradient(x), self.hessian(x)


@dataclass(frozen=True)
class QuadraticLoss(LossModel):
    """``L(x) = x^T A x / 2`` for a symmetric PSD ``A``; constant Hessian."""

    A: np.ndarray

    @property
    def dim(self):
        return self.A.shape[0]

    @property
    def manifold_rank(self):
        return int(np.linalg.matrix_rank(self.A))

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.A, x)

    def gradient(self, x):
        return np.asarray(x, dtype=float) @ self.A.T

    def hessian(self, x):
        return np.array(self.A, dtype=float)

    def third_contraction(self, x, A):
        return np.zeros(self.dim)


@dataclass(frozen=True)
class ScaledLoss(LossModel):
    """``c * base``: same minimiser manifold, rescaled curvature."""

    base: LossModel
    scale: float

    @property
    def dim(self):
        return self.base.dim

    @property
    def manifold_rank(self):
        return self.base.manifold_rank

    def value(self, x):
        return self.scale * self.base.value(x)

    def gradient(self, x):
        return self.scale * self.base.gradient(x)

    def hessian(self, x):
        return self.scale * self.base.hessian(x)

    def third_contraction(self, x, A):
        return self.scale * self.base.third_contraction(x, A)


def fd_step(x) -> float:
    return 1e-4 * (1.0 + float(np.linalg.norm(x)))


def fd_third_contraction(loss: LossModel, x, A, h: float | None = None) -> np.ndarray:
    """Central differences of the Hessian along the eigenvectors of ``A``.

    With ``A = sum_k mu_k q_k q_k^T`` the contraction is
    ``sum_k mu_k d/dt [q_k^T H(x + t e_i) q_k]``; by symmetry of third
    derivatives that equals ``sum_k mu_k d/dt H(x + t q_k) q_k`` taken
    componentwise, which needs two Hessians per eigenvector.
    """
    x = np.asarray(x, dtype=float)
    if h is None:
        h = fd_step(x)
    if h <= 0:
        raise ValueError("step must be positive")
    A = np.asarray(A, dtype=float)
    mu, Q = np.linalg.eigh(0.5 * (A + A.T))
    out = np.zeros_like(x)
    scale = np.max(np.abs(mu), initial=0.0)
    for m, q in zip(mu, Q.T):
        if abs(m) <= 1e-14 * scale or m == 0.0:
            continue
        dH = (loss.hessian(x + h * q) - loss.hessian(x - h * q)) / (2 * h)
        out += m * (dH @ q)
    return out


# ---------------------------------------------------------------------------
# overparametrised linear model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OlmProblem(LossModel):
    """Sparse regression fitted through ``w = u*u - v*v``.

    State is ``x = (u, v)`` in R^{2d}; the loss is the mean over samples of
    ``(z_i . w - y_i)^2 / 2``.
    """

    Z: np.ndarray
    y: np.ndarray
    w_star: np.ndarray
    sparsity: int
    seed: int | None = None
    dist: str = "gaussian"
    _rank: int = field(default=-1, repr=False)

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "w_star", np.asarray(self.w_star, dtype=float))
        rank = int(np.linalg.matrix_rank(Z)) if Z.size else 0
        object.__setattr__(self, "_rank", rank)

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    @property
    def dim(self) -> int:
        return 2 * self.d

    @property
    def manifold_rank(self) -> int:
        # n when n <= d (the generic case); capped at d for over-determined data
        return self._rank

    @property
    def signed_data(self) -> np.ndarray:
        """Rows ``c_i = (z_i, -z_i)`` so that ``grad f_i(x) = 2 c_i * x``."""
        return np.hstack([self.Z, -self.Z])

    @property
    def coordinate_weights(self) -> np.ndarray:
        """``s_j = (4/n) sum_i z_ij^2``, also the weights of the l1 program."""
        if self.n == 0:
            return np.zeros(self.d)
        return 4.0 / self.n * np.sum(self.Z**2, axis=0)

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., : self.d], x[..., self.d :]

    def effective_weights(self, x):
        u, v = self.split(x)
        return u * u - v * v

    def outputs(self, x):
        return self.effective_weights(x) @ self.Z.T

    def residuals(self, x):
        return self.outputs(x) - self.y

    def output_gradients(self, x) -> np.ndarray:
        """Matrix whose rows are ``grad f_i(x)``, shape ``(n, 2d)``."""
        return 2.0 * self.signed_data * np.asarray(x, dtype=float)

    def value(self, x):
        r = self.residuals(x)
        return 0.5 * np.mean(r * r, axis=-1) if self.n else np.zeros(np.shape(x)[:-1])

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.n == 0:
            return np.zeros_like(x)
        u, v = self.split(x)
        back = self.residuals(x) @ self.Z * (2.0 / self.n)
        return np.concatenate([back * u, -back * v], axis=-1)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        if self.n == 0:
            return np.zeros((self.dim, self.dim))
        G = self.output_gradients(x)
        C = self.signed_data
        r = self.residuals(x)
        return (G.T @ G + 2.0 * np.diag(C.T @ r)) / self.n

    def third_contraction(self, x, A):
        x = np.asarray(x, dtype=float)
        if self.n == 0:
            return np.zeros_like(x)
        A = 0.5 * (np.asarray(A, dtype=float) + np.asarray(A, dtype=float).T)
        G = self.output_gradients(x)
        C = self.signed_data
        AG = G @ A
        return (4.0 * np.sum(C * AG, axis=0) + 2.0 * G.T @ (C @ np.diag(A))) / self.n

    def to_text(self) -> str:
        lines = [f"{self.n} {self.d} {self.sparsity} {self.seed if self.seed is not None else -1}"]
        lines += [" ".join(repr(float(a)) for a in row) for row in self.Z]
        lines.append(" ".join(repr(float(a)) for a in self.w_star))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "OlmProblem":
        rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
        n, d, kappa, seed = (int(t) for t in rows[0])
        Z = np.array([[float(t) for t in r] for r in rows[1 : 1 + n]]).reshape(n, d)
        w = np.array([float(t) for t in rows[1 + n]])
        return cls(Z, Z @ w, w, kappa, None if seed < 0 else seed)

    @classmethod
    def load(cls, path) -> "OlmProblem":
        return cls.from_text(Path(path).read_text())


def olm_generate(
    n: int,
    d: int,
    kappa: int,
    dist: str = "gaussian",
    magnitude_range: tuple[float, float] = (0.5, 2.0),
    seed: int = 0,
    max_retries: int = 10,
) -> OlmProblem:
    """Draw data and a ``kappa``-sparse groundtruth.

    Boolean data are redrawn up to ``max_retries`` times if the design is rank
    deficient; Gaussian data get a single attempt.
    """
    if not 1 <= kappa < d:
        raise ValueError(f"need 1 <= kappa < d, got kappa={kappa}, d={d}")
    if n < 1:
        raise ValueError("need at least one sample")
    if dist not in ("gaussian", "boolean"):
        raise ValueError(f"unknown data distribution {dist!r}")
    rng = np.random.default_rng(seed)
    lo, hi = magnitude_range
    support = rng.choice(d, size=kappa, replace=False)
    w = np.zeros(d)
    w[support] = rng.uniform(lo, hi, size=kappa) * rng.choice([-1.0, 1.0], size=kappa)
    attempts = max_retries if dist == "boolean" else 1
    for _ in range(attempts):
        if dist == "gaussian":
            Z = rng.standard_normal((n, d))
        else:
            Z = rng.choice([-1.0, 1.0], size=(n, d))
        if np.linalg.matrix_rank(Z) == min(n, d):
            return OlmProblem(Z, Z @ w, w, kappa, seed, dist)
    raise DegenerateDataError(f"rank(Z) < min(n, d) after {attempts} draw(s); try another seed")


def olm_loss_eval(p: OlmProblem, x):
    return p.value(x), p.gradient(x), p.hessian(x)


def olm_third_contraction(p: OlmProblem, x, A):
    return p.third_contraction(x, A)


def canonical_param(w) -> np.ndarray:
    """``(sqrt([w]_+), sqrt([-w]_+))``: the representation with ``u*v = 0``."""
    w = np.asarray(w, dtype=float)
    return np.concatenate([np.sqrt(np.clip(w, 0, None)), np.sqrt(np.clip(-w, 0, None))], axis=-1)


# ---------------------------------------------------------------------------
# k-phase motor
# ---------------------------------------------------------------------------


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True, eq=False)
class MotorProblem(LossModel):
    """Circle of minimisers in the first two coordinates, ``D - 2`` auxiliary
    directions whose curvature is modulated by rotated copies of ``v_unit``.
    """

    dim: int = 5
    v_unit: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))
    directions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim < 5:
            raise ValueError("the motor needs at least three auxiliary coordinates (D >= 5)")
        v = np.asarray(self.v_unit, dtype=float)
        if v.shape != (2,) or abs(np.linalg.norm(v) - 1.0) > 1e-12:
            raise ValueError("v_unit must be a unit vector in R^2")
        object.__setattr__(self, "v_unit", v)
        k = self.dim - 2
        dirs = np.array([rotation(self.alpha * j) @ v for j in range(k)])
        object.__setattr__(self, "directions", dirs)

    @property
    def alpha(self) -> float:
        return 2 * math.pi / (self.dim - 2)

    @property
    def manifold_rank(self) -> int:
        return self.dim - 1

    def curvatures(self, x):
        """``2 + <Q_alpha^j v, x_{1:2}>`` for each auxiliary coordinate."""
        x = np.asarray(x, dtype=float)
        return 2.0 + x[..., :2] @ self.directions.T

    def value(self, x):
        x = np.asarray(x, dtype=float)
        r = np.sum(x[..., :2] ** 2, axis=-1)
        return (r - 1.0) ** 2 / 8.0 + 0.5 * np.sum(self.curvatures(x) * x[..., 2:] ** 2, axis=-1)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        p, q = x[..., :2], x[..., 2:]
        r = np.sum(p * p, axis=-1, keepdims=True)
        gp = 0.5 * (r - 1.0) * p + 0.5 * (q * q) @ self.directions
        gq = self.curvatures(x) * q
        return np.concatenate([gp, gq], axis=-1)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        p, q = x[:2], x[2:]
        H = np.zeros((self.dim, self.dim))
        H[:2, :2] = np.outer(p, p) + 0.5 * (p @ p - 1.0) * np.eye(2)
        cross = self.directions.T * q
        H[:2, 2:] = cross
        H[2:, :2] = cross.T
        H[2:, 2:] = np.diag(self.curvatures(x))
        return H

    def third_contraction(self, x, A):
        x = np.asarray(x, dtype=float)
        A = 0.5 * (np.asarray(A, dtype=float) + np.asarray(A, dtype=float).T)
        p = x[:2]
        App = A[:2, :2]
        out = np.zeros(self.dim)
        out[:2] = 2.0 * App @ p + np.trace(App) * p + self.directions.T @ np.diag(A)[2:]
        out[2:] = 2.0 * np.einsum("ja,aj->j", self.directions, A[:2, 2:])
        return out

    def noise_variances(self, x):
        """Diagonal of the motor noise covariance, clamped at zero off the circle."""
        x = np.asarray(x, dtype=float)
        w = np.stack([x[..., 1], -x[..., 0]], axis=-1)
        drive = 1.0 + w @ self.directions.T
        var = np.clip(drive * self.curvatures(x), 0.0, None)
        out = np.zeros(x.shape)
        out[..., 2:] = var
        return out

    def circle_point(self, theta: float) -> np.ndarray:
        x = np.zeros(self.dim)
        x[0], x[1] = math.cos(theta), math.sin(theta)
        return x


def motor_loss_eval(p: MotorProblem, x):
    return p.value(x), p.gradient(x), p.hessian(x)


def motor_third_contraction(p: MotorProblem, x, A):
    return p.third_contraction(x, A)
