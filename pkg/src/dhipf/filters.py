"""One-step transition operators for six nonlinear filters.

Each ``*_step`` maps ``(model, ensemble, y, rng, ...)`` to the next ensemble,
assimilating the observation ``y``. ``predict_step`` propagates without an
observation and is used between sparse observations.

The homotopy filters blend an artificial drift ``b`` into the model drift
``f`` through ``(1 - beta_l) b + beta_l f``. By default ``b`` pulls every
particle onto the observation in one step, so the lowest level trusts the
data and the top level is the true model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .implicit import WEIGHT_MODES, SamplerStats, build_objective, implicit_sample
from .models import DriftFn, StateSpaceModel, predict_mean, step_state
from .optimize import OptimizationError
from .particles import Ensemble, normalize_weights, resample_indices
from .probability import diag_gaussian_logpdf, likelihood_logpdf

FILTER_KINDS = ("bootstrap", "apf", "enkf", "ipf", "dhpf", "dhipf")
HOMOTOPY_KINDS = ("dhpf", "dhipf")


class FilterError(RuntimeError):
    """A filter step failed; carries the particle and homotopy level if known."""

    def __init__(self, message: str, particle: Optional[int] = None, level: Optional[int] = None):
        where = []
        if particle is not None:
            where.append(f"particle {particle}")
        if level is not None:
            where.append(f"level {level}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))
        self.particle = particle
        self.level = level


# -- homotopy machinery ---------------------------------------------------------


@dataclass(frozen=True)
class HomotopySchedule:
    """Coefficients ``beta_0 = 0 < ... < beta_L = 1`` and the artificial drift.

    ``intermediate_drift=None`` means "rebuild the data-pull drift from each
    new observation".
    """

    levels: int
    betas: tuple
    intermediate_drift: Optional[DriftFn] = None

    def __post_init__(self):
        betas = tuple(float(b) for b in self.betas)
        if self.levels < 1:
            raise ValueError("homotopy needs at least one level")
        if len(betas) != self.levels + 1:
            raise ValueError(f"need {self.levels + 1} betas, got {len(betas)}")
        if betas[0] != 0.0 or betas[-1] != 1.0:
            raise ValueError("betas must start at 0 and end at 1")
        if any(b1 <= b0 for b0, b1 in zip(betas, betas[1:])):
            raise ValueError("betas must be strictly increasing")
        object.__setattr__(self, "betas", betas)

    @classmethod
    def linear(cls, levels: int, intermediate_drift: Optional[DriftFn] = None) -> "HomotopySchedule":
        return cls(levels, tuple(l / levels for l in range(levels + 1)), intermediate_drift)

    def with_drift(self, b: DriftFn) -> "HomotopySchedule":
        return replace(self, intermediate_drift=b)


def homotopy_drift(schedule: HomotopySchedule, f: DriftFn, level: int) -> DriftFn:
    if not 0 <= level <= schedule.levels:
        raise ValueError(f"level {level} outside 0..{schedule.levels}")
    beta = schedule.betas[level]
    b = schedule.intermediate_drift
    if beta == 1.0:
        return f
    if b is None:
        raise ValueError("schedule has no intermediate drift bound")
    if beta == 0.0:
        return b
    return lambda x: (1.0 - beta) * b(x) + beta * f(x)


def default_intermediate_drift(y, pullback: Optional[Callable], dt: float) -> DriftFn:
    """Drift whose one-step prediction lands exactly on the data pullback."""
    if pullback is None:
        raise ValueError("intermediate drift requires pullback")
    target = np.asarray(pullback(np.atleast_1d(np.asarray(y, dtype=float))), dtype=float)
    return lambda x: (target - np.asarray(x, dtype=float)) / dt


def bind_schedule(schedule: HomotopySchedule, model: StateSpaceModel, y) -> HomotopySchedule:
    if schedule.intermediate_drift is not None:
        return schedule
    return schedule.with_drift(default_intermediate_drift(y, model.obs_pullback, model.dt))


# -- configuration -----------------------------------------------------------------


@dataclass
class FilterConfig:
    kind: str
    n_particles: int = 20
    enkf_ensemble: int = 200
    levels: Optional[int] = None
    betas: Optional[tuple] = None
    mcmc_steps: int = 50
    mcmc_step_size: Optional[float] = None
    grad_tol: float = 1e-8
    max_iter: int = 100
    weight_mode: str = "jacobian"
    final_resample: bool = True
    resampling: str = "multinomial"
    seed: Optional[int] = None
    label: Optional[str] = None

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}; expected one of {FILTER_KINDS}")
        if self.kind in HOMOTOPY_KINDS:
            if self.levels is None:
                self.levels = len(self.betas) - 1 if self.betas is not None else 2
        elif self.levels is not None or self.betas is not None:
            raise ValueError(f"filter {self.kind!r} takes no homotopy levels")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.enkf_ensemble < 2:
            raise ValueError("enkf_ensemble must be >= 2")
        if self.mcmc_steps < 0:
            raise ValueError("mcmc_steps must be >= 0")
        if self.mcmc_step_size is not None and self.mcmc_step_size < 0:
            raise ValueError("mcmc_step_size must be >= 0")
        if self.grad_tol <= 0 or self.max_iter < 1:
            raise ValueError("optimizer tolerances must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.resampling not in ("multinomial", "systematic"):
            raise ValueError("resampling must be 'multinomial' or 'systematic'")
        if self.betas is not None:
            self.betas = tuple(float(b) for b in self.betas)
        self.schedule()  # validates betas against levels

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind in HOMOTOPY_KINDS and self.levels != 2:
            return f"{self.kind}-L{self.levels}"
        return self.kind

    @property
    def ensemble_size(self) -> int:
        return self.enkf_ensemble if self.kind == "enkf" else self.n_particles

    def schedule(self) -> Optional[HomotopySchedule]:
        if self.kind not in HOMOTOPY_KINDS:
            return None
        if self.betas is None:
            return HomotopySchedule.linear(self.levels)
        return HomotopySchedule(self.levels, self.betas)


@dataclass
class StepStats:
    """Diagnostics accumulated over a run."""

    sampler: SamplerStats = field(default_factory=SamplerStats)
    mcmc_proposals: int = 0
    mcmc_accepted: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.mcmc_accepted / self.mcmc_proposals if self.mcmc_proposals else float("nan")


# -- helpers ----------------------------------------------------------------------


def _prior_log_weights(ensemble: Ensemble) -> np.ndarray:
    if ensemble.log_weights is None:
        return np.zeros(ensemble.size)
    return ensemble.log_weights


def _finish(particles: np.ndarray, log_weights: np.ndarray, step: int, rng, method: str) -> Ensemble:
    """Normalise, record the weighted mean, then resample to equal weights."""
    w = normalize_weights(log_weights)
    estimate = w @ particles
    idx = resample_indices(w, rng, method)
    return Ensemble(particles[idx], None, step, estimate)


def _method(config: Optional[FilterConfig]) -> str:
    return config.resampling if config is not None else "multinomial"


# -- steps -------------------------------------------------------------------------


def predict_step(model: StateSpaceModel, ensemble: Ensemble, rng: np.random.Generator) -> Ensemble:
    """Propagate every member through the dynamics; weights are carried over."""
    P = ensemble.particles
    x = step_state(model, P, rng.standard_normal(P.shape))
    out = Ensemble(x, ensemble.log_weights, ensemble.step + 1)
    w = ensemble.weights()
    out.estimate = w @ x
    return out


def bootstrap_step(model: StateSpaceModel, ensemble: Ensemble, y, rng: np.random.Generator,
                   config: Optional[FilterConfig] = None) -> Ensemble:
    P = ensemble.particles
    x = step_state(model, P, rng.standard_normal(P.shape))
    lw = _prior_log_weights(ensemble) + likelihood_logpdf(model, x, y)
    return _finish(x, lw, ensemble.step + 1, rng, _method(config))


def apf_first_stage(model: StateSpaceModel, ensemble: Ensemble, y) -> tuple[np.ndarray, np.ndarray]:
    """Predicted means and the log-likelihood of ``y`` at each of them."""
    mu = predict_mean(model.drift, ensemble.particles, model.dt)
    return mu, likelihood_logpdf(model, mu, y)


def apf_step(model: StateSpaceModel, ensemble: Ensemble, y, rng: np.random.Generator,
             config: Optional[FilterConfig] = None) -> Ensemble:
    """Auxiliary particle filter with first-stage weights at the predicted mean."""
    P = ensemble.particles
    mu, first = apf_first_stage(model, ensemble, y)
    anc = resample_indices(normalize_weights(_prior_log_weights(ensemble) + first), rng, _method(config))
    x = mu[anc] + model.transition_scale * rng.standard_normal(P.shape)
    lw = likelihood_logpdf(model, x, y) - first[anc]
    return _finish(x, lw, ensemble.step + 1, rng, _method(config))


def enkf_step(model: StateSpaceModel, ensemble: Ensemble, y, rng: np.random.Generator,
              config: Optional[FilterConfig] = None) -> Ensemble:
    """Stochastic ensemble Kalman filter with perturbed observations."""
    X = ensemble.particles
    M = X.shape[0]
    if M < 2:
        raise FilterError("EnKF needs at least two members")
    xf = step_state(model, X, rng.standard_normal(X.shape))
    yf = np.asarray(model.observation(xf), dtype=float)
    A = xf - xf.mean(axis=0)
    B = yf - yf.mean(axis=0)
    Pxy = A.T @ B / (M - 1)
    Pyy = B.T @ B / (M - 1) + np.diag(model.obs_noise_scale**2)
    try:
        if np.linalg.cond(Pyy) > 1e14:
            raise np.linalg.LinAlgError
        K = np.linalg.solve(Pyy, Pxy.T).T
    except np.linalg.LinAlgError:
        raise FilterError("singular innovation covariance") from None
    y = np.atleast_1d(np.asarray(y, dtype=float))
    perturbed = y + model.obs_noise_scale * rng.standard_normal((M, model.obs_dim))
    xa = xf + (perturbed - yf) @ K.T
    return Ensemble(xa, None, ensemble.step + 1, xa.mean(axis=0))


def _implicit(model, drift, x_prev, y, xi, warm, config: FilterConfig, stats, level):
    if not np.isfinite(warm).all():
        bad = np.flatnonzero(~np.isfinite(warm).all(axis=1))
        raise FilterError("non-finite warm start", particle=int(bad[0]), level=level)
    obj = build_objective(drift, model.diffusion_scale, model.dt, model.noise_scaling, x_prev, model, y)
    try:
        sample = implicit_sample(obj, xi, warm, grad_tol=config.grad_tol, max_iter=config.max_iter,
                                 weight_mode=config.weight_mode)
    except OptimizationError as exc:
        raise FilterError(str(exc), particle=exc.rows[0] if exc.rows else None, level=level) from exc
    if stats is not None:
        stats.sampler.record(obj, sample, level=level if level is not None else 0)
    return obj, sample


def ipf_step(model: StateSpaceModel, ensemble: Ensemble, y, rng: np.random.Generator,
             config: Optional[FilterConfig] = None, stats: Optional[StepStats] = None) -> Ensemble:
    """Implicit particle filter: one implicit sample per particle, then resample."""
    config = config or FilterConfig("ipf")
    P = ensemble.particles
    xi = rng.standard_normal(P.shape)
    warm = predict_mean(model.drift, P, model.dt)
    _, sample = _implicit(model, model.drift, P, y, xi, warm, config, stats, None)
    lw = _prior_log_weights(ensemble) + sample.log_weight
    return _finish(sample.x, lw, ensemble.step + 1, rng, config.resampling)


def dhipf_step(model: StateSpaceModel, ensemble: Ensemble, y, rng: np.random.Generator,
               schedule: Optional[HomotopySchedule] = None, config: Optional[FilterConfig] = None,
               stats: Optional[StepStats] = None) -> Ensemble:
    """Drift homotopy implicit particle filter.

    Pass ``l = 0 .. L-1`` samples the objective built from the level ``l+1``
    homotopy drift, warm-started from the previous pass's sample. The first
    pass starts from the deterministic prediction under its own drift. The
    top pass uses the model drift, and its weights drive the final resample.
    """
    config = config or FilterConfig("dhipf")
    schedule = bind_schedule(schedule or config.schedule(), model, y)
    P = ensemble.particles
    warm = predict_mean(homotopy_drift(schedule, model.drift, 1), P, model.dt)
    for l in range(schedule.levels):
        drift = homotopy_drift(schedule, model.drift, l + 1)
        xi = rng.standard_normal(P.shape)
        _, sample = _implicit(model, drift, P, y, xi, warm, config, stats, l)
        warm = sample.x
    if not config.final_resample:
        return Ensemble(sample.x, None, ensemble.step + 1, sample.x.mean(axis=0))
    lw = _prior_log_weights(ensemble) + sample.log_weight
    return _finish(sample.x, lw, ensemble.step + 1, rng, config.resampling)


def dhpf_mcmc_step(model: StateSpaceModel, ensemble: Ensemble, y, rng: np.random.Generator,
                   schedule: Optional[HomotopySchedule] = None, config: Optional[FilterConfig] = None,
                   stats: Optional[StepStats] = None) -> Ensemble:
    """Drift homotopy particle filter with random-walk Metropolis moves.

    A bootstrap proposal and resample pick the ancestors; each particle then
    runs a Metropolis chain through levels ``0..L`` targeting
    ``p_l(x | ancestor) p(y | x)``, each level starting where the last ended.
    """
    config = config or FilterConfig("dhpf")
    schedule = bind_schedule(schedule or config.schedule(), model, y)
    P = ensemble.particles
    n = P.shape[0]
    s = model.transition_scale
    step = s if config.mcmc_step_size is None else config.mcmc_step_size

    x = step_state(model, P, rng.standard_normal(P.shape))
    lw = _prior_log_weights(ensemble) + likelihood_logpdf(model, x, y)
    anc = resample_indices(normalize_weights(lw), rng, config.resampling)
    ancestors, x = P[anc], x[anc]

    accepted = 0
    for l in range(schedule.levels + 1):
        mean = predict_mean(homotopy_drift(schedule, model.drift, l), ancestors, model.dt)

        def log_target(z):
            return diag_gaussian_logpdf(z, mean, s) + likelihood_logpdf(model, z, y)

        current = log_target(x)
        for _ in range(config.mcmc_steps):
            proposal = x + step * rng.standard_normal(x.shape)
            lp = log_target(proposal)
            accept = np.log(rng.random(n)) < lp - current
            x = np.where(accept[:, None], proposal, x)
            current = np.where(accept, lp, current)
            accepted += int(accept.sum())
    if stats is not None:
        stats.mcmc_proposals += n * config.mcmc_steps * (schedule.levels + 1)
        stats.mcmc_accepted += accepted
    return Ensemble(x, None, ensemble.step + 1, x.mean(axis=0))


def assimilate(model: StateSpaceModel, ensemble: Ensemble, y, rng: np.random.Generator,
               config: FilterConfig, stats: Optional[StepStats] = None) -> Ensemble:
    """Dispatch one assimilation step by ``config.kind``."""
    kind = config.kind
    if kind == "bootstrap":
        return bootstrap_step(model, ensemble, y, rng, config)
    if kind == "apf":
        return apf_step(model, ensemble, y, rng, config)
    if kind == "enkf":
        return enkf_step(model, ensemble, y, rng, config)
    if kind == "ipf":
        return ipf_step(model, ensemble, y, rng, config, stats)
    if kind == "dhpf":
        return dhpf_mcmc_step(model, ensemble, y, rng, config.schedule(), config, stats)
    return dhipf_step(model, ensemble, y, rng, config.schedule(), config, stats)
