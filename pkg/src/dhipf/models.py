"""Discrete-time state-space models, benchmark drifts and synthetic truth.

The state evolves by an Euler-Maruyama step

    X_{n+1} = X_n + f(X_n) dt + s w_n,      Y_{n+1} = g(X_{n+1}) + R v_n

where ``s`` is either ``sigma * sqrt(dt)`` (``"sqrt_dt"``, the default) or
``sigma`` itself (``"per_step"``). All drift and observation callables act on
arrays whose last axis is the state dimension, so a whole particle cloud of
shape ``(N, d)`` can be pushed through in one call.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

DriftFn = Callable[[np.ndarray], np.ndarray]

NOISE_SCALINGS = ("sqrt_dt", "per_step")


def drift_doublewell(x, alpha: float = 1.0):
    """Force of the double-well potential U(x) = alpha/4 (x^4 - 2x^2)."""
    return -alpha * (x**3 - x)


def drift_lorenz63(x, a1: float = 10.0, a2: float = 28.0, a3: float = 8.0 / 3.0):
    """Lorenz 63 vector field, vectorised over leading axes."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError(f"Lorenz 63 state must have 3 components, got {x.shape[-1]}")
    u, v, w = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([a1 * (v - u), a2 * u - v - u * w, u * v - a3 * w], axis=-1)


def _identity(x):
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class StateSpaceModel:
    """Additive-Gaussian state-space model with diagonal noise.

    ``obs_jacobian`` maps a batch ``(N, d)`` to ``(N, m, d)``; leave it unset to
    fall back on finite differences. ``obs_pullback`` maps an observation back
    to a state and is needed only by the default homotopy drift.
    """

    state_dim: int
    obs_dim: int
    drift: DriftFn
    diffusion_scale: np.ndarray
    observation: Callable[[np.ndarray], np.ndarray]
    obs_noise_scale: np.ndarray
    dt: float
    noise_scaling: str = "sqrt_dt"
    obs_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    obs_pullback: Optional[Callable[[np.ndarray], np.ndarray]] = None
    obs_linear: bool = False
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        if self.state_dim < 1 or self.obs_dim < 1:
            raise ValueError("state_dim and obs_dim must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.noise_scaling not in NOISE_SCALINGS:
            raise ValueError(f"noise_scaling must be one of {NOISE_SCALINGS}")
        sig = np.broadcast_to(np.asarray(self.diffusion_scale, dtype=float), (self.state_dim,)).copy()
        obs = np.broadcast_to(np.asarray(self.obs_noise_scale, dtype=float), (self.obs_dim,)).copy()
        # sigma = 0 is allowed (deterministic dynamics); R must stay positive.
        if np.any(sig < 0) or np.any(~np.isfinite(sig)):
            raise ValueError("diffusion_scale must be finite and >= 0")
        if np.any(obs <= 0) or np.any(~np.isfinite(obs)):
            raise ValueError("obs_noise_scale must be finite and > 0")
        object.__setattr__(self, "diffusion_scale", sig)
        object.__setattr__(self, "obs_noise_scale", obs)

    @property
    def transition_scale(self) -> np.ndarray:
        """Standard deviation of the one-step state noise."""
        return transition_scale(self.diffusion_scale, self.dt, self.noise_scaling)


def transition_scale(sigma, dt: float, noise_scaling: str = "sqrt_dt") -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if noise_scaling == "sqrt_dt":
        return sigma * np.sqrt(dt)
    if noise_scaling == "per_step":
        return sigma
    raise ValueError(f"unknown noise_scaling {noise_scaling!r}")


def _check_state(model: StateSpaceModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 and model.state_dim == 1:
        x = x.reshape(1)
    if x.shape[-1] != model.state_dim:
        raise ValueError(f"state has dimension {x.shape[-1]}, model expects {model.state_dim}")
    return x


def predict_mean(drift: DriftFn, x, dt: float) -> np.ndarray:
    """One deterministic Euler step ``x + drift(x) dt``."""
    x = np.asarray(x, dtype=float)
    return x + drift(x) * dt


def step_state(model: StateSpaceModel, x, noise) -> np.ndarray:
    x = _check_state(model, x)
    noise = np.asarray(noise, dtype=float)
    if noise.shape[-1:] != (model.state_dim,) and not (noise.ndim == 0 and model.state_dim == 1):
        raise ValueError("noise dimension does not match state_dim")
    return predict_mean(model.drift, x, model.dt) + model.transition_scale * noise


def observe(model: StateSpaceModel, x, noise) -> np.ndarray:
    x = _check_state(model, x)
    noise = np.asarray(noise, dtype=float)
    if noise.shape[-1:] != (model.obs_dim,) and not (noise.ndim == 0 and model.obs_dim == 1):
        raise ValueError("noise dimension does not match obs_dim")
    return np.asarray(model.observation(x), dtype=float) + model.obs_noise_scale * noise


def observation_jacobian(model: StateSpaceModel, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Jacobian of g at a batch of states, shape ``(N, m, d)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if model.obs_jacobian is not None:
        return np.asarray(model.obs_jacobian(x), dtype=float)
    n, d = x.shape
    jac = np.empty((n, model.obs_dim, d))
    for j in range(d):
        h = eps * (1.0 + np.abs(x[:, j]))
        xp, xm = x.copy(), x.copy()
        xp[:, j] += h
        xm[:, j] -= h
        jac[:, :, j] = (model.observation(xp) - model.observation(xm)) / (2 * h)[:, None]
    return jac


# -- benchmark models ---------------------------------------------------------


def _identity_obs_kwargs(d: int) -> dict:
    eye = np.eye(d)
    return dict(
        observation=_identity,
        obs_jacobian=lambda x: np.broadcast_to(eye, (np.atleast_2d(x).shape[0], d, d)),
        obs_pullback=_identity,
        obs_linear=True,
    )


def doublewell_model(alpha=1.0, sigma=1.5, R=1.5, dt=0.01, noise_scaling="sqrt_dt") -> StateSpaceModel:
    return StateSpaceModel(
        state_dim=1,
        obs_dim=1,
        drift=lambda x: drift_doublewell(x, alpha),
        diffusion_scale=np.array([sigma], dtype=float),
        obs_noise_scale=np.array([R], dtype=float),
        dt=dt,
        noise_scaling=noise_scaling,
        name="doublewell",
        **_identity_obs_kwargs(1),
    )


def lorenz63_model(a1=10.0, a2=28.0, a3=8.0 / 3.0, sigma=1.0, R=1.0, dt=0.01,
                   noise_scaling="sqrt_dt") -> StateSpaceModel:
    return StateSpaceModel(
        state_dim=3,
        obs_dim=3,
        drift=lambda x: drift_lorenz63(x, a1, a2, a3),
        diffusion_scale=np.full(3, sigma, dtype=float),
        obs_noise_scale=np.full(3, R, dtype=float),
        dt=dt,
        noise_scaling=noise_scaling,
        name="lorenz63",
        **_identity_obs_kwargs(3),
    )


def linear_gaussian_model(a=0.9, sigma=1.0, R=1.0, dt=1.0) -> StateSpaceModel:
    """Scalar AR(1) model x' = a x + sigma w written as an Euler step."""
    return StateSpaceModel(
        state_dim=1,
        obs_dim=1,
        drift=lambda x: (a - 1.0) * np.asarray(x, dtype=float) / dt,
        diffusion_scale=np.array([sigma / np.sqrt(dt)]),
        obs_noise_scale=np.array([R], dtype=float),
        dt=dt,
        noise_scaling="sqrt_dt",
        name="linear",
        **_identity_obs_kwargs(1),
    )


# -- truth generation -----------------------------------------------------------


@dataclass
class Trajectory:
    states: np.ndarray  # (N + 1, d)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]

    @property
    def step_count(self) -> int:
        return self.states.shape[0] - 1

    def __len__(self):
        return self.states.shape[0]


@dataclass
class ObservationSeries:
    steps: np.ndarray  # (K,), strictly increasing, spaced by ``gap``
    values: np.ndarray  # (K, m)
    gap: int = 1

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.steps) != len(self.values):
            raise ValueError("steps and values differ in length")
        if len(self.steps) > 1 and np.any(np.diff(self.steps) != self.gap):
            raise ValueError("observation steps must be spaced by the gap")

    def __len__(self):
        return len(self.steps)

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(k): v for k, v in zip(self.steps, self.values)}


def simulate_truth(model: StateSpaceModel, x0, n_steps: int, gap: int = 1, seed=None,
                   switch_at: Optional[int] = None) -> tuple[Trajectory, ObservationSeries]:
    """Simulate a reference path and its observations every ``gap`` steps.

    If ``switch_at`` is given the state is negated at that step, forcing a jump
    between the wells of a symmetric potential.
    """
    if n_steps < 1 or gap < 1:
        raise ValueError("n_steps and gap must be >= 1")
    rng = np.random.default_rng(seed)
    x = _check_state(model, x0).astype(float).reshape(model.state_dim)
    states = np.empty((n_steps + 1, model.state_dim))
    states[0] = x
    steps, values = [], []
    for n in range(1, n_steps + 1):
        x = step_state(model, x, rng.standard_normal(model.state_dim))
        if switch_at is not None and n == switch_at:
            x = -x
        states[n] = x
        if n % gap == 0:
            steps.append(n)
            values.append(observe(model, x, rng.standard_normal(model.obs_dim)))
    values = np.array(values).reshape(len(steps), model.obs_dim)
    return Trajectory(states), ObservationSeries(np.array(steps, dtype=int), values, gap)


# -- CSV ---------------------------------------------------------------------


def write_trajectory_csv(path, traj: Trajectory) -> None:
    d = traj.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"x_{j}" for j in range(d)])
        for n, row in enumerate(traj.states):
            w.writerow([n] + [repr(float(v)) for v in row])


def read_trajectory_csv(path) -> Trajectory:
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return Trajectory(data[:, 1:])


def write_observations_csv(path, obs: ObservationSeries) -> None:
    m = obs.values.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"y_{j}" for j in range(m)])
        for k, row in zip(obs.steps, obs.values):
            w.writerow([int(k)] + [repr(float(v)) for v in row])


def read_observations_csv(path, gap: Optional[int] = None) -> ObservationSeries:
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    steps = data[:, 0].astype(int)
    if gap is None:
        gap = int(steps[1] - steps[0]) if len(steps) > 1 else int(steps[0])
    return ObservationSeries(steps, data[:, 1:], gap)
