"""Weighted particle ensembles, weight normalisation and resampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np


class DegenerateWeightsError(ValueError):
    """Raised when every importance weight underflows to zero."""


@dataclass
class Ensemble:
    """``N`` particles of dimension ``d`` with optional log-weights.

    ``estimate`` optionally caches the weighted mean computed before the
    ensemble was resampled, which has lower variance than the mean of the
    resampled cloud.
    """

    particles: np.ndarray
    log_weights: Optional[np.ndarray] = None
    step: int = 0
    estimate: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("particles must have shape (N, d) with N >= 1")
        self.particles = p
        if self.log_weights is not None:
            lw = np.asarray(self.log_weights, dtype=float)
            if lw.shape != (p.shape[0],):
                raise ValueError("log_weights must have one entry per particle")
            self.log_weights = lw

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def weights(self) -> np.ndarray:
        if self.log_weights is None:
            return np.full(self.size, 1.0 / self.size)
        return normalize_weights(self.log_weights)


def point_ensemble(x0, n: int, step: int = 0) -> Ensemble:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return Ensemble(np.tile(x0, (n, 1)), step=step)


def normalize_weights(log_weights) -> np.ndarray:
    """Exponentiate after subtracting the maximum and normalise to sum one."""
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0 or np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise DegenerateWeightsError("log-weights must be finite or -inf")
    top = lw.max()
    if not np.isfinite(top):
        raise DegenerateWeightsError("degenerate weight vector")
    w = np.exp(lw - top)
    return w / w.sum()


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def _check_normalized(weights: np.ndarray, n: int) -> None:
    if weights.shape != (n,):
        raise ValueError("need one weight per particle")
    if np.any(weights < 0) or not np.isfinite(weights).all():
        raise ValueError("weights must be finite and nonnegative")
    if abs(weights.sum() - 1.0) > 1e-8:
        raise ValueError(f"weights are not normalised (sum={weights.sum():.12g})")


def resample_indices(weights, rng: np.random.Generator, method: str = "multinomial") -> np.ndarray:
    """Ancestor indices by inverse-CDF lookup of uniform draws.

    A draw falling exactly on a cumulative sum goes to the interval on its
    right, so zero-weight particles are never selected.
    """
    w = np.asarray(weights, dtype=float)
    n = w.shape[0]
    _check_normalized(w, n)
    cdf = np.cumsum(w)
    if method == "multinomial":
        zeta = rng.random(n)
    elif method == "systematic":
        zeta = (rng.random() + np.arange(n)) / n
    else:
        raise ValueError(f"unknown resampling method {method!r}")
    # scale by the rounded total so every draw lands strictly below cdf[-1]
    return np.searchsorted(cdf, zeta * cdf[-1], side="right")


def resample_inverse_cdf(ensemble: Ensemble, weights, rng: np.random.Generator,
                         method: str = "multinomial") -> Ensemble:
    idx = resample_indices(weights, rng, method)
    return Ensemble(ensemble.particles[idx], None, ensemble.step)


def estimate_mean(ensemble: Ensemble) -> np.ndarray:
    if ensemble.log_weights is None:
        return ensemble.particles.mean(axis=0)
    return ensemble.weights() @ ensemble.particles


def with_estimate(ensemble: Ensemble, estimate) -> Ensemble:
    return replace(ensemble, estimate=np.asarray(estimate, dtype=float))


def write_ensemble_csv(path, ensemble: Ensemble, append: bool = False) -> None:
    """Snapshot as ``step, particle_index, x_0..x_{d-1}, weight`` rows."""
    w = ensemble.weights()
    with open(path, "a" if append else "w", newline="") as fh:
        out = csv.writer(fh)
        if not append:
            out.writerow(["step", "particle_index"] + [f"x_{j}" for j in range(ensemble.dim)] + ["weight"])
        for i, (row, wi) in enumerate(zip(ensemble.particles, w)):
            out.writerow([ensemble.step, i] + [repr(float(v)) for v in row] + [repr(float(wi))])
