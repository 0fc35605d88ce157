"""Gradient flow ``dx/dt = -grad L(x)`` and its limit map onto the minimisers."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import NonConvergedError
from .linalg_core import spectral_decompose

INTEGRATORS = ("rk4_fixed", "rk45_adaptive", "radau")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    loss: np.ndarray
    grad_norm: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.loss = np.asarray(self.loss, dtype=float)
        self.grad_norm = np.asarray(self.grad_norm, dtype=float)

    def __len__(self):
        return len(self.times)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def is_valid(self) -> bool:
        return bool(
            np.all(np.diff(self.times) > 0)
            and np.all(np.isfinite(self.states))
            and len(self.states) == len(self.times)
        )

    def to_csv(self, path=None, header_lines=()) -> str:
        D = self.states.shape[1]
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        buf.write(",".join(["t"] + [f"x_{i + 1}" for i in range(D)] + ["loss", "grad_norm"]) + "\n")
        for t, x, l, g in zip(self.times, self.states, self.loss, self.grad_norm):
            buf.write(",".join(f"{a:.17g}" for a in (t, *x, l, g)) + "\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "Trajectory":
        rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        data = np.array([[float(a) for a in ln.split(",")] for ln in rows[1:]])
        data = data.reshape(-1, len(rows[0].split(",")))
        return cls(data[:, 0], data[:, 1:-2], data[:, -2], data[:, -1])


@dataclass(frozen=True)
class FlowConfig:
    integrator: str = "rk45_adaptive"
    dt: float = 1e-2
    atol: float = 1e-10
    rtol: float = 1e-8
    grad_stop: float = 1e-10
    t_max: float = 1e6
    record_stride: int = 1
    max_steps: int = 10_000_000

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}")
        if self.grad_stop <= 0 or self.t_max <= 0 or self.dt <= 0:
            raise ValueError("grad_stop, t_max and dt must be positive")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

_STEP_CAP_REFRESH = 25
_LOSS_SLACK = 1e-8


def stability_step_cap(loss, x) -> float:
    lam = spectral_decompose(loss.hessian(x)).eigenvalues
    top = float(np.max(np.abs(lam))) if lam.size else 0.0
    return 2.0 / top if top > 0 else np.inf


class _Recorder:
    def __init__(self, stride):
        self.stride = stride
        self.t, self.x, self.l, self.g = [], [], [], []
        self.count = 0

    def push(self, t, x, l, g, force=False):
        if force or self.count % self.stride == 0:
            if self.t and t <= self.t[-1]:
                return
            self.t.append(t)
            self.x.append(np.array(x))
            self.l.append(l)
            self.g.append(g)
        self.count += 1

    def finish(self, t, x, l, g):
        if not self.t or self.t[-1] < t:
            self.t.append(t)
            self.x.append(np.array(x))
            self.l.append(l)
            self.g.append(g)
        return Trajectory(np.array(self.t), np.array(self.x), np.array(self.l), np.array(self.g))


def flow(loss, x0, cfg: FlowConfig | None = None) -> Trajectory:
    """Integrate the gradient flow until ``|grad L| <= cfg.grad_stop``.

    Steps that raise the loss by more than ``1e-8 * max(1, |L|)`` are rejected
    and retried with half the step.

    Raises
    ------
    NonConvergedError
        ``cfg.t_max`` (or ``cfg.max_steps``) reached first; the partial
        trajectory is attached.
    """
    cfg = cfg or FlowConfig()
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("initial point must be finite")
    if cfg.integrator == "rk4_fixed":
        return _flow_rk4(loss, x, cfg)
    if cfg.integrator == "radau":
        return _flow_radau(loss, x, cfg)
    return _flow_dp45(loss, x, cfg)


def _flow_dp45(loss, x, cfg):
    t = 0.0
    g = loss.gradient(x)
    L = float(loss.value(x))
    gn = float(np.linalg.norm(g))
    rec = _Recorder(cfg.record_stride)
    rec.push(t, x, L, gn, force=True)
    cap = stability_step_cap(loss, x)
    h = min(cap, 0.1 / max(gn, 1e-300), 1.0)
    accepted = 0
    k = np.empty((7, x.size))
    for _ in range(cfg.max_steps):
        if gn <= cfg.grad_stop:
            return rec.finish(t, x, L, gn)
        if t >= cfg.t_max:
            break
        h = min(h, cap, cfg.t_max - t)
        k[0] = -g
        for i in range(1, 7):
            k[i] = -loss.gradient(x + h * (np.dot(_A[i], k[:i]) if i else 0.0))
        x_new = x + h * (_B5 @ k)
        err_vec = h * (_E @ k)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(x), np.abs(x_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
        if err > 1.0 or not np.all(np.isfinite(x_new)):
            h *= max(0.2, 0.9 * err ** -0.2) if np.isfinite(err) else 0.2
            continue
        L_new = float(loss.value(x_new))
        if L_new - L > _LOSS_SLACK * max(1.0, abs(L)):
            h *= 0.5
            continue
        t += h
        x = x_new
        L = L_new
        g = -k[6]
        gn = float(np.linalg.norm(g))
        accepted += 1
        rec.push(t, x, L, gn)
        if accepted % _STEP_CAP_REFRESH == 0:
            cap = stability_step_cap(loss, x)
        h *= min(5.0, 0.9 * err ** -0.2) if err > 0 else 5.0
    traj = rec.finish(t, x, L, gn)
    raise NonConvergedError(
        f"gradient norm {gn:.3e} > {cfg.grad_stop:.1e} at t={t:.3g}", trajectory=traj
    )


def _flow_rk4(loss, x, cfg):
    t = 0.0
    g = loss.gradient(x)
    L = float(loss.value(x))
    gn = float(np.linalg.norm(g))
    rec = _Recorder(cfg.record_stride)
    rec.push(t, x, L, gn, force=True)
    for _ in range(cfg.max_steps):
        if gn <= cfg.grad_stop:
            return rec.finish(t, x, L, gn)
        if t >= cfg.t_max:
            break
        h = min(cfg.dt, cfg.t_max - t)
        while True:
            k1 = -g
            k2 = -loss.gradient(x + 0.5 * h * k1)
            k3 = -loss.gradient(x + 0.5 * h * k2)
            k4 = -loss.gradient(x + h * k3)
            x_new = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            L_new = float(loss.value(x_new))
            if np.all(np.isfinite(x_new)) and L_new - L <= _LOSS_SLACK * max(1.0, abs(L)):
                break
            h *= 0.5
            if h < 1e-14:
                raise NonConvergedError("rk4 step collapsed", trajectory=rec.finish(t, x, L, gn))
        t += h
        x, L = x_new, L_new
        g = loss.gradient(x)
        gn = float(np.linalg.norm(g))
        rec.push(t, x, L, gn)
    traj = rec.finish(t, x, L, gn)
    raise NonConvergedError(
        f"gradient norm {gn:.3e} > {cfg.grad_stop:.1e} at t={t:.3g}", trajectory=traj
    )


def _flow_radau(loss, x, cfg):
    """Implicit Radau IIA with the exact Jacobian ``-Hess L``.

    For badly conditioned Hessians, where the explicit step cap makes the
    adaptive Runge-Kutta path crawl. The horizon is extended geometrically
    until the gradient test passes.
    """
    t = 0.0
    L = float(loss.value(x))
    gn = float(np.linalg.norm(loss.gradient(x)))
    rec = _Recorder(cfg.record_stride)
    rec.push(t, x, L, gn, force=True)
    span = 1.0
    while gn > cfg.grad_stop:
        if t >= cfg.t_max:
            raise NonConvergedError(
                f"gradient norm {gn:.3e} > {cfg.grad_stop:.1e} at t={t:.3g}", trajectory=rec.finish(t, x, L, gn)
            )
        t_end = min(t + span, cfg.t_max)
        sol = solve_ivp(
            lambda _t, z: -loss.gradient(z),
            (t, t_end),
            x,
            method="Radau",
            jac=lambda _t, z: -loss.hessian(z),
            rtol=max(cfg.rtol, 1e-13),
            atol=cfg.atol,
        )
        if not sol.success:
            raise NonConvergedError(f"radau failed: {sol.message}", trajectory=rec.finish(t, x, L, gn))
        for ti, xi in zip(sol.t[1:], sol.y.T[1:]):
            rec.push(float(ti), xi, float(loss.value(xi)), float(np.linalg.norm(loss.gradient(xi))))
        t, x = float(sol.t[-1]), sol.y[:, -1].copy()
        L = float(loss.value(x))
        gn = float(np.linalg.norm(loss.gradient(x)))
        span *= 2.0
    return rec.finish(t, x, L, gn)


def phi_limit(loss, x0, cfg: FlowConfig | None = None) -> np.ndarray:
    """Endpoint of the gradient flow started at ``x0``."""
    cfg = cfg or FlowConfig()
    # only the endpoint is needed
    cfg = FlowConfig(**{**cfg.__dict__, "record_stride": 10**9})
    return flow(loss, x0, cfg).final


@dataclass(frozen=True)
class ManifoldCheck:
    ok: bool
    grad_norm: float
    rank: int
    expected_rank: int
    min_nonzero_eigenvalue: float
    reason: str = ""

    def __bool__(self):
        return self.ok


def on_manifold(loss, x, grad_tol: float = 1e-7, rank_rel_tol: float = 1e-8) -> ManifoldCheck:
    """Check stationarity and the Hessian-rank condition at ``x``."""
    x = np.asarray(x, dtype=float)
    gn = float(np.linalg.norm(loss.gradient(x)))
    dec = spectral_decompose(loss.hessian(x), rank_rel_tol)
    nz = dec.eigenvalues[dec.nonzero]
    lam_min = float(nz.min()) if nz.size else 0.0
    reasons = []
    if not gn <= grad_tol:
        reasons.append(f"gradient norm {gn:.3e} > {grad_tol:.1e}")
    if dec.rank != loss.manifold_rank:
        reasons.append(f"hessian rank {dec.rank} != {loss.manifold_rank}")
    if nz.size and lam_min <= 0:
        reasons.append(f"nonzero eigenvalue {lam_min:.3e} is not positive")
    return ManifoldCheck(not reasons, gn, dec.rank, loss.manifold_rank, lam_min, "; ".join(reasons))
