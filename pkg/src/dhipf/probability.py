"""Diagonal Gaussian log-densities used by every filter.

Everything is evaluated in log space; the last axis is the event axis and any
leading axes are treated as a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import StateSpaceModel, predict_mean, transition_scale

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class DiagonalGaussian:
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        scale = np.broadcast_to(np.asarray(self.scale, dtype=float), mean.shape[-1:]).copy()
        if np.any(scale <= 0):
            raise ValueError("scale must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    def logpdf(self, x) -> np.ndarray:
        return diag_gaussian_logpdf(x, self.mean, self.scale)


def diag_gaussian_logpdf(x, mean, scale) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if mean.ndim == 0:
        mean = mean.reshape(1)
    k = x.shape[-1]
    if mean.shape[-1] != k or (scale.ndim and scale.shape[-1] not in (1, k)):
        raise ValueError(f"dimension mismatch: x has {k}, mean has {mean.shape[-1]}")
    z = (x - mean) / scale
    log_norm = np.sum(np.broadcast_to(np.log(scale), (k,)))
    return -0.5 * np.sum(z * z, axis=-1) - log_norm - 0.5 * k * LOG_2PI


def gaussian_logpdf(x, dist: DiagonalGaussian) -> np.ndarray:
    return dist.logpdf(x)


def transition_logpdf(drift, sigma, dt: float, x_prev, x_next, noise_scaling: str = "sqrt_dt"):
    """log p(x_next | x_prev) for one Euler-Maruyama step of ``drift``."""
    x_prev = np.asarray(x_prev, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    if x_prev.shape[-1:] != x_next.shape[-1:]:
        raise ValueError("x_prev and x_next have different dimensions")
    mean = predict_mean(drift, x_prev, dt)
    return diag_gaussian_logpdf(x_next, mean, transition_scale(sigma, dt, noise_scaling))


def likelihood_logpdf(model: StateSpaceModel, x, y) -> np.ndarray:
    """log p(y | x) under the model's observation operator and noise."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != model.state_dim:
        raise ValueError(f"state has dimension {x.shape[-1]}, model expects {model.state_dim}")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape[-1] != model.obs_dim:
        raise ValueError(f"observation has dimension {y.shape[-1]}, model expects {model.obs_dim}")
    return diag_gaussian_logpdf(y, model.observation(x), model.obs_noise_scale)
