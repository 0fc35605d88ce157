"""Distribution-level comparison of SGD endpoints with the limiting diffusion.

Ensembles are compared through three numbers: the distance between their
means, the Frobenius distance between their covariances, and a sliced
1-Wasserstein distance over a fixed set of random directions.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import wasserstein_distance

from .dynamics import SdeConfig, limit_sde_ensemble, sgd_ensemble, steps_for_horizon

N_SLICES = 16
SLICE_SEED = 20220118
SWEEP_COLUMNS = ("eta", "steps", "n_seeds", "n_diverged", "mean_dist", "cov_fro_dist", "sw1")


def slice_directions(dim: int, n_slices: int = N_SLICES, seed: int = SLICE_SEED) -> np.ndarray:
    """Unit vectors drawn from a seed that no simulation uses."""
    g = np.random.default_rng(seed).standard_normal((n_slices, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass
class EnsembleSummary:
    """A cloud of endpoints with its first two moments.

    Attributes
    ----------
    points : (N, D) ndarray
    mean : (D,) ndarray
    covariance : (D, D) ndarray
        Maximum-likelihood (``1/N``) covariance, symmetrised.
    projection_seed : int
        Seed of the slicing directions used by :func:`compare`.
    """

    points: np.ndarray
    mean: np.ndarray = field(init=False)
    covariance: np.ndarray = field(init=False)
    projection_seed: int = SLICE_SEED

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] == 0:
            raise ValueError("an ensemble needs at least one point")
        self.points = pts
        self.mean = pts.mean(axis=0)
        c = pts - self.mean
        cov = c.T @ c / pts.shape[0]
        self.covariance = 0.5 * (cov + cov.T)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]


def sliced_w1(A, B, directions) -> float:
    """Mean over ``directions`` of the exact 1D Wasserstein-1 distance of projections."""
    return float(np.mean([wasserstein_distance(A @ u, B @ u) for u in directions]))


def compare(A: EnsembleSummary, B: EnsembleSummary, n_slices: int = N_SLICES) -> dict:
    """Mean, covariance and sliced Wasserstein distances between two ensembles.

    Raises
    ------
    ValueError
        If the ensembles live in different dimensions.
    """
    if A.dim != B.dim:
        raise ValueError(f"dimension mismatch: {A.dim} vs {B.dim}")
    dirs = slice_directions(A.dim, n_slices, A.projection_seed)
    return {
        "mean_dist": float(np.linalg.norm(A.mean - B.mean)),
        "cov_fro_dist": float(np.linalg.norm(A.covariance - B.covariance)),
        "sw1": sliced_w1(A.points, B.points, dirs),
    }


@dataclass
class SweepTable:
    rows: list
    reference: EnsembleSummary | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path=None, header_lines=()) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([r["eta"], r["steps"], r["n_seeds"], r["n_diverged"]] + [f"{r[k]:.17g}" for k in SWEEP_COLUMNS[4:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def trend_non_increasing(values, slack: float = 0.10, allowed_inversions: int = 1) -> bool:
    """True if ``values`` never rise, except for at most ``allowed_inversions``
    rises of no more than ``slack`` relative to the previous entry."""
    v = list(values)
    inversions = 0
    for prev, cur in zip(v, v[1:]):
        if cur <= prev:
            continue
        if cur > prev * (1 + slack):
            return False
        inversions += 1
    return inversions <= allowed_inversions


def convergence_sweep(
    loss,
    noise,
    x0,
    T: float,
    etas,
    seeds_per_eta: int,
    sde_dt: float = 1e-3,
    reference_seeds=None,
    base_seed: int = 0,
) -> SweepTable:
    """Compare SGD endpoints at time ``T`` (``floor(T / eta^2)`` steps) with
    the limiting diffusion at ``T``, one row per learning rate.

    Parameters
    ----------
    etas : sequence of float
        Learning rates, in descending order.
    seeds_per_eta : int
        SGD runs per learning rate; seeds are ``base_seed .. base_seed + n - 1``.
    sde_dt : float
        Euler-Maruyama step of the reference ensemble.
    reference_seeds : sequence of int, optional
        Seeds for the reference ensemble. Defaults to a block disjoint from
        the SGD seeds, of the same size.

    Notes
    -----
    Diverged runs are dropped from the comparison and counted in
    ``n_diverged``. A row whose every run diverged reports NaN distances.
    """
    etas = [float(e) for e in etas]
    if not etas:
        raise ValueError("etas must be non-empty")
    if any(b >= a for a, b in zip(etas, etas[1:])):
        raise ValueError("etas must be strictly descending")
    if seeds_per_eta < 1:
        raise ValueError("seeds_per_eta must be positive")
    seeds = list(range(base_seed, base_seed + seeds_per_eta))
    if reference_seeds is None:
        reference_seeds = list(range(base_seed + 10**6, base_seed + 10**6 + seeds_per_eta))
    ref_pts = limit_sde_ensemble(loss, noise, x0, SdeConfig(dt=sde_dt, T=T), reference_seeds)
    ref = EnsembleSummary(ref_pts)
    rows = []
    for eta in etas:
        steps = steps_for_horizon(T, eta)
        final, diverged = sgd_ensemble(loss, noise, eta, steps, x0, seeds)
        kept = final[~diverged]
        row = {"eta": eta, "steps": steps, "n_seeds": len(seeds), "n_diverged": int(diverged.sum())}
        if len(kept):
            row.update(compare(EnsembleSummary(kept), ref))
        else:
            row.update(mean_dist=float("nan"), cov_fro_dist=float("nan"), sw1=float("nan"))
        rows.append(row)
    return SweepTable(rows, ref)
