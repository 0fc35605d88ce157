"""Discrete SGD and the limiting dynamics on the manifold of minimisers.

Time is always measured on the manifold scale ``t = k * eta**2``, so
``T / eta**2`` SGD steps are compared against the limiting process at time
``T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, NotOnManifoldError, NotPSDError
from .gradient_flow import FlowConfig, Trajectory, on_manifold, phi_limit
from .linalg_core import psd_sqrt, spectral_decompose
from .loss_models import MotorProblem, OlmProblem, rotation
from .phi_calculus import _split, local_geometry, normal_lyapunov

DIVERGENCE_NORM = 1e8
# noise variates are drawn in blocks so a seed's path does not depend on
# how many other seeds are stepped alongside it
_BLOCK = 1024


# ---------------------------------------------------------------------------
# noise models
# ---------------------------------------------------------------------------


class NoiseModel:
    """State-dependent gradient noise with mean zero.

    ``variates(rng, size)`` draws the raw randomness for ``size`` steps and
    ``transform(x, raw)`` turns it into noise vectors; both are batched over
    leading axes. ``sample`` chains the two.
    """

    kind = "custom"
    raw_width: int

    def covariance(self, x) -> np.ndarray:
        raise NotImplementedError

    def variates(self, rng, size):
        return rng.standard_normal((*np.atleast_1d(size), self.raw_width))

    def transform(self, x, raw):
        raise NotImplementedError

    def sample(self, x, rng):
        x = np.asarray(x, dtype=float)
        raw = self.variates(rng, x.shape[:-1] or 1)
        out = self.transform(x if x.ndim > 1 else x[None], raw.reshape(-1, raw.shape[-1]))
        return out.reshape(x.shape)


class IsotropicNoise(NoiseModel):
    kind = "isotropic"

    def __init__(self, dim: int, scale: float = 1.0):
        self.dim = dim
        self.scale = scale
        self.raw_width = dim

    def covariance(self, x):
        return self.scale**2 * np.eye(self.dim)

    def transform(self, x, raw):
        return self.scale * raw


class MotorNoise(NoiseModel):
    """Diagonal noise on the auxiliary coordinates of the k-phase motor."""

    kind = "motor"

    def __init__(self, problem: MotorProblem):
        self.problem = problem
        self.raw_width = problem.dim

    def covariance(self, x):
        return np.diag(self.problem.noise_variances(x))

    def transform(self, x, raw):
        return np.sqrt(self.problem.noise_variances(x)) * raw


class LabelNoise(NoiseModel):
    """Per-sample gradient noise from labels perturbed by ``+-delta``.

    A step with raw draw ``(i, s)`` moves along
    ``-(f_i(x) - y_i + s * delta) grad f_i(x)``; the noise is that minus the
    full gradient.
    """

    kind = "label_noise"
    raw_width = 2

    def __init__(self, problem: OlmProblem, delta: float = 1.0):
        self.problem = problem
        self.delta = float(delta)

    def variates(self, rng, size):
        size = tuple(np.atleast_1d(size))
        idx = rng.integers(0, self.problem.n, size=size)
        sign = rng.choice(np.array([-1.0, 1.0]), size=size)
        return np.stack([idx.astype(float), sign], axis=-1)

    def per_sample_direction(self, x, raw):
        p = self.problem
        x = np.atleast_2d(x)
        idx = raw[:, 0].astype(int)
        r = p.residuals(x)[np.arange(x.shape[0]), idx]
        grad_f = 2.0 * p.signed_data[idx] * x
        return (r + self.delta * raw[:, 1])[:, None] * grad_f

    def transform(self, x, raw):
        return self.per_sample_direction(x, raw) - self.problem.gradient(x)

    def covariance(self, x):
        p = self.problem
        x = np.asarray(x, dtype=float)
        G = p.output_gradients(x)
        r = p.residuals(x)
        g = p.gradient(x)
        return (G.T * (r**2 + self.delta**2)) @ G / p.n - np.outer(g, g)


class CustomNoise(NoiseModel):
    """Gaussian noise with a user-supplied covariance function."""

    kind = "custom"

    def __init__(self, covariance_fn, dim: int):
        self.covariance_fn = covariance_fn
        self.dim = dim
        self.raw_width = dim

    def covariance(self, x):
        return np.asarray(self.covariance_fn(np.asarray(x, dtype=float)), dtype=float)

    def transform(self, x, raw):
        out = np.empty_like(raw)
        for i, (xi, ri) in enumerate(zip(np.atleast_2d(x), raw)):
            root = psd_sqrt(spectral_decompose(self.covariance(xi), 1e-12))
            out[i] = root @ ri
        return out


class ZeroNoise(NoiseModel):
    kind = "zero"

    def __init__(self, dim: int):
        self.dim = dim
        self.raw_width = 1

    def covariance(self, x):
        return np.zeros((self.dim, self.dim))

    def transform(self, x, raw):
        return np.zeros(np.atleast_2d(x).shape)


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    eta: float
    steps: int
    seed: int = 0
    record_stride: int = 1

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 1:
            raise ValueError("need at least one step")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")


def steps_for_horizon(T: float, eta: float) -> int:
    return int(math.floor(T / eta**2 + 1e-9))


def _sgd_batch(loss, noise, eta, steps, x0, seeds, record_stride=None):
    """Step one SGD chain per seed in lockstep.

    Returns the final states, a divergence mask, the step at which each chain
    diverged (or -1) and, if ``record_stride`` is set, the recorded states.
    """
    seeds = list(seeds)
    N = len(seeds)
    x = np.tile(np.asarray(x0, dtype=float), (N, 1))
    alive = np.ones(N, dtype=bool)
    died_at = np.full(N, -1)
    rngs = [np.random.default_rng(s) for s in seeds]
    records = [] if record_stride else None
    if records is not None:
        records.append((0, x.copy()))
    done = 0
    while done < steps:
        block = min(_BLOCK, steps - done)
        raw = np.stack([noise.variates(g, block) for g in rngs], axis=1)
        for b in range(block):
            live = alive if not alive.all() else slice(None)
            xs = x[live]
            xs = xs - eta * (loss.gradient(xs) + noise.transform(xs, raw[b][live]))
            x[live] = xs
            k = done + b + 1
            with np.errstate(over="ignore", invalid="ignore"):
                norms = np.linalg.norm(x, axis=1)
            bad = ~np.isfinite(norms) | (norms > DIVERGENCE_NORM)
            newly = bad & alive
            if newly.any():
                alive &= ~newly
                died_at[newly] = k
            if records is not None and (k % record_stride == 0 or k == steps):
                records.append((k, x.copy()))
        done += block
    return x, ~alive, died_at, records


def sgd_run(loss, noise: NoiseModel, cfg: SgdConfig, x0) -> Trajectory:
    """SGD ``x <- x - eta (grad L(x) + noise)`` with timestamps ``k eta^2``.

    Raises
    ------
    DivergenceError
        When ``|x|`` exceeds 1e8 or becomes non-finite.
    """
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial point must be finite")
    final, diverged, died_at, records = _sgd_batch(
        loss, noise, cfg.eta, cfg.steps, x0, [cfg.seed], cfg.record_stride
    )
    if diverged[0]:
        raise DivergenceError(f"SGD diverged at step {died_at[0]}", step=int(died_at[0]))
    ks = np.array([k for k, _ in records])
    states = np.array([s[0] for _, s in records])
    return Trajectory(
        ks * cfg.eta**2,
        states,
        loss.value(states),
        np.linalg.norm(loss.gradient(states), axis=1),
        {"eta": cfg.eta, "steps": ks, "seed": cfg.seed},
    )


def sgd_ensemble(loss, noise: NoiseModel, eta: float, steps: int, x0, seeds):
    """Final SGD states for each seed, plus a divergence mask.

    Row ``i`` follows the same noise draws as ``sgd_run`` with
    ``seed=seeds[i]``; the two agree up to rounding in batched arithmetic.
    """
    final, diverged, _, _ = _sgd_batch(loss, noise, eta, steps, x0, seeds)
    return final, diverged


# ---------------------------------------------------------------------------
# limiting dynamics
# ---------------------------------------------------------------------------


def drift_components(loss, noise: NoiseModel, x, check: bool = True) -> dict:
    """The three named drift terms of the limiting diffusion at ``x``."""
    geo = local_geometry(loss, x, check=check)
    Sigma = noise.covariance(geo.x)
    s = _split(geo.P, Sigma)
    x = geo.x
    compensation = -0.5 * geo.H_pinv @ loss.third_contraction(x, s.sigma_par)
    B = geo.H_pinv @ s.sigma_cross
    mixed = -geo.P @ loss.third_contraction(x, 0.5 * (B + B.T))
    lyap = normal_lyapunov(geo.dec, s, Sigma)
    normal = -0.5 * geo.P @ loss.third_contraction(x, lyap)
    return {"tangent_compensation": compensation, "mixed": mixed, "normal": normal, "geometry": geo, "split": s}


def limiting_drift(loss, noise: NoiseModel, x, check: bool = True) -> np.ndarray:
    c = drift_components(loss, noise, x, check)
    return c["tangent_compensation"] + c["mixed"] + c["normal"]


def limiting_diffusion_factor(loss, noise: NoiseModel, x, check: bool = True) -> np.ndarray:
    """Symmetric square root of the tangent block of the noise covariance."""
    geo = local_geometry(loss, x, check=check)
    Sigma = noise.covariance(geo.x)
    s = _split(geo.P, Sigma)
    par = 0.5 * (s.sigma_par + s.sigma_par.T)
    # round-off is judged against the whole covariance, not the tangent block
    floor = 1e-12 * float(np.linalg.norm(Sigma))
    lam, V = np.linalg.eigh(par)
    if lam.size and lam[0] < -max(floor, 1e-10 * abs(lam[-1])):
        raise NotPSDError(f"tangent noise block has eigenvalue {lam[0]:.3e}")
    keep = lam > floor
    return (V[:, keep] * np.sqrt(lam[keep])) @ V[:, keep].T


@dataclass(frozen=True)
class SdeConfig:
    dt: float
    T: float
    retraction_every: int = 20
    seed: int = 0
    record_stride: int = 1

    def __post_init__(self):
        if not self.dt > 0 or not self.T > 0:
            raise ValueError("dt and T must be positive")
        if self.retraction_every < 1 or self.record_stride < 1:
            raise ValueError("retraction_every and record_stride must be >= 1")


RETRACTION_FLOW = FlowConfig(atol=1e-12, rtol=1e-10, grad_stop=1e-11, t_max=1e5)


def _record(loss, ts, xs, meta):
    xs = np.array(xs)
    return Trajectory(
        np.array(ts), xs, np.atleast_1d(loss.value(xs)), np.linalg.norm(loss.gradient(xs), axis=-1), meta
    )


def simulate_limit_sde(loss, noise: NoiseModel, x0, cfg: SdeConfig) -> Trajectory:
    """Euler-Maruyama for the limiting diffusion with periodic retraction.

    Every ``cfg.retraction_every`` steps (and at the end) the state is mapped
    back through Phi. Retracted points that fail ``on_manifold`` are counted
    in ``meta['manifold_violations']`` instead of being discarded.
    """
    x = np.asarray(x0, dtype=float)
    chk = on_manifold(loss, x)
    if not chk:
        raise NotOnManifoldError(f"initial point is not on the manifold: {chk.reason}", chk)
    rng = np.random.default_rng(cfg.seed)
    n_steps = max(1, int(round(cfg.T / cfg.dt)))
    dt = cfg.T / n_steps
    sq = math.sqrt(dt)
    ts, xs = [0.0], [x.copy()]
    violations = 0
    for k in range(1, n_steps + 1):
        drift = limiting_drift(loss, noise, x, check=False)
        root = limiting_diffusion_factor(loss, noise, x, check=False)
        xi = rng.standard_normal(x.size)
        x = x + drift * dt + sq * (root @ xi)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            raise DivergenceError(f"limiting SDE diverged at step {k}", step=k)
        if k % cfg.retraction_every == 0 or k == n_steps:
            x = phi_limit(loss, x, RETRACTION_FLOW)
            if not on_manifold(loss, x):
                violations += 1
        if k % cfg.record_stride == 0 or k == n_steps:
            ts.append(k * dt)
            xs.append(x.copy())
    return _record(loss, ts, xs, {"manifold_violations": violations, "seed": cfg.seed, "dt": dt})


def limit_sde_ensemble(loss, noise: NoiseModel, x0, cfg: SdeConfig, seeds) -> np.ndarray:
    """Final states of ``simulate_limit_sde`` for each seed, in seed order."""
    out = []
    for s in seeds:
        c = SdeConfig(cfg.dt, cfg.T, cfg.retraction_every, s, record_stride=10**9)
        out.append(simulate_limit_sde(loss, noise, x0, c).final)
    return np.array(out)


def _projected_sharpness_gradient(loss, x, c):
    geo = local_geometry(loss, x, check=False)
    grad_tr = loss.third_contraction(geo.x, np.eye(geo.x.size))
    return -0.25 * c * (geo.P @ grad_tr)


def label_noise_flow(
    loss, c: float, x0, T: float, dt: float, retraction_every: int = 20, stop_tol: float = 0.0
) -> Trajectory:
    """RK4 on ``dY/dt = -(1/4) dPhi(Y) grad tr[c Hess L(Y)]``.

    ``meta['trace_hessian']`` holds ``tr Hess L`` at each recorded point and
    ``meta['drift_norm']`` the norm of the projected gradient of the trace.
    Integration stops early once that norm drops below ``stop_tol``.
    """
    x = np.asarray(x0, dtype=float)
    chk = on_manifold(loss, x)
    if not chk:
        raise NotOnManifoldError(f"initial point is not on the manifold: {chk.reason}", chk)
    n_steps = max(1, int(round(T / dt)))
    h = T / n_steps
    f = lambda y: _projected_sharpness_gradient(loss, y, c)  # noqa: E731
    ts, xs = [0.0], [x.copy()]
    traces = [float(np.trace(loss.hessian(x)))]
    k1 = f(x)
    norms = [float(np.linalg.norm(k1)) / (0.25 * c) if c else 0.0]
    for k in range(1, n_steps + 1):
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            raise DivergenceError(f"label-noise flow diverged at step {k}", step=k)
        if k % retraction_every == 0 or k == n_steps:
            x = phi_limit(loss, x, RETRACTION_FLOW)
        k1 = f(x)
        ts.append(k * h)
        xs.append(x.copy())
        traces.append(float(np.trace(loss.hessian(x))))
        norms.append(float(np.linalg.norm(k1)) / (0.25 * c) if c else 0.0)
        if norms[-1] < stop_tol:
            break
    return _record(loss, ts, xs, {"trace_hessian": np.array(traces), "drift_norm": np.array(norms)})


def isotropic_flow_step(loss, x, check: bool = True):
    """Drift and diffusion of the limiting diffusion for identity noise.

    With ``Sigma = I`` the normal block is ``I - dPhi`` and its Lyapunov
    inverse is ``H^+ / 2``, so

        drift = -(1/2) H^+ T[dPhi] - (1/4) dPhi T[H^+]

    where ``T[H^+]`` is the gradient of ``ln pdet(H)``. The second piece is
    half of the ``-(1/2) dPhi grad ln pdet(H)`` one gets by skipping the
    Lyapunov factor; the finite-difference second derivative of Phi sides
    with the form above.
    """
    geo = local_geometry(loss, x, check=check)
    compensation = -0.5 * geo.H_pinv @ loss.third_contraction(geo.x, geo.P)
    regularization = -0.25 * geo.P @ loss.third_contraction(geo.x, geo.H_pinv)
    return compensation + regularization, geo.P


def isotropic_regularization(loss, x, check: bool = True) -> np.ndarray:
    """Normal-regularisation drift ``-(1/4) dPhi grad ln pdet(H)`` for identity noise."""
    geo = local_geometry(loss, x, check=check)
    return -0.25 * geo.P @ loss.third_contraction(geo.x, geo.H_pinv)


# ---------------------------------------------------------------------------
# k-phase motor closed form
# ---------------------------------------------------------------------------


def motor_claimed_speed(dim: int) -> float:
    """Angular speed ``(D - 2) / 2`` quoted for the k-phase motor."""
    return (dim - 2) / 2.0


def motor_limit_speed(dim: int) -> float:
    """Angular speed of the limiting drift as computed from the closed form.

    The Lyapunov inverse of the motor noise is ``diag(c_j / 2)`` and the
    auxiliary sum gives ``(D - 2) / 2``, so the drift is
    ``-(1/2)(1/2)(D - 2)/2 * Q_{-pi/2} x = (D - 2)/8 * Q_{pi/2} x``.
    """
    return (dim - 2) / 8.0


def motor_analytic(x0, t: float, speed: float | None = None) -> np.ndarray:
    """Rotate the circle coordinates of ``x0`` by ``speed * t``; zero the rest.

    ``speed`` defaults to :func:`motor_claimed_speed`.
    """
    x0 = np.asarray(x0, dtype=float)
    if speed is None:
        speed = motor_claimed_speed(x0.size)
    out = np.zeros_like(x0)
    out[:2] = rotation(speed * t) @ x0[:2]
    return out


def circle_angle(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.arctan2(x[..., 1], x[..., 0])


def angular_advance(x0, x1) -> np.ndarray:
    """Signed angle from ``x0`` to ``x1`` in the first two coordinates, in (-pi, pi]."""
    d = circle_angle(x1) - circle_angle(x0)
    return (d + np.pi) % (2 * np.pi) - np.pi
