"""Benchmark experiments: double-well tracking and Lorenz 63.

An :class:`ExperimentSpec` fixes a model, a truth-generation recipe and a list
of filters. :func:`run_experiment` draws one truth per repeat and runs every
filter on the same observations, recording per-step squared errors, the
accumulated MSE and the wall-clock time of the filter loop.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .filters import FilterConfig, FilterError, StepStats, assimilate, predict_step
from .models import (
    NOISE_SCALINGS,
    ObservationSeries,
    StateSpaceModel,
    Trajectory,
    doublewell_model,
    linear_gaussian_model,
    lorenz63_model,
    simulate_truth,
)
from .optimize import OptimizationError
from .particles import DegenerateWeightsError, estimate_mean, point_ensemble

log = logging.getLogger(__name__)

MODELS = ("doublewell", "lorenz63", "linear")

DOUBLEWELL_CASES = {
    1: dict(alpha=1.0, sigma=1.5, R=1.5),
    2: dict(alpha=1.0, sigma=1.0, R=1.0),
    3: dict(alpha=10.0, sigma=1.0, R=2.0),
}


class ConfigError(ValueError):
    """Invalid experiment specification; the message names the offending key."""


@dataclass
class ExperimentSpec:
    name: str
    model: str
    model_params: dict
    x0: list
    n_steps: int
    filters: list
    gap: int = 1
    seed: int = 0
    switch_at: Optional[int] = None
    repeats: int = 1

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model: unknown model {self.model!r}; expected one of {MODELS}")
        for key in ("n_steps", "gap", "repeats"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if self.switch_at is not None and not 1 <= self.switch_at <= self.n_steps:
            raise ConfigError("switch_at: must lie within the run")
        if not self.filters:
            raise ConfigError("filters: at least one filter is required")
        names = [f.name for f in self.filters]
        if len(set(names)) != len(names):
            raise ConfigError(f"filters: duplicate filter names {names}")
        ns = self.model_params.get("noise_scaling", "sqrt_dt")
        if ns not in NOISE_SCALINGS:
            raise ConfigError(f"model_params.noise_scaling: must be one of {NOISE_SCALINGS}")
        build_model(self)  # surfaces bad parameters early

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["filters"] = [filter_to_dict(f) for f in self.filters]
        return d


def filter_to_dict(config: FilterConfig) -> dict:
    d = dataclasses.asdict(config)
    if d["betas"] is not None:
        d["betas"] = list(d["betas"])
    return d


def build_model(spec: ExperimentSpec) -> StateSpaceModel:
    p = dict(spec.model_params)
    try:
        if spec.model == "doublewell":
            model = doublewell_model(**p)
        elif spec.model == "lorenz63":
            model = lorenz63_model(**p)
        else:
            model = linear_gaussian_model(**p)
    except TypeError as exc:
        raise ConfigError(f"model_params: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"model_params: {exc}") from None
    if len(spec.x0) != model.state_dim:
        raise ConfigError(f"x0: expected {model.state_dim} components, got {len(spec.x0)}")
    return model


# -- built-in experiments ---------------------------------------------------------


def _doublewell_filters(n_particles=20, enkf=200, levels=2) -> list:
    return [
        FilterConfig("bootstrap", n_particles=n_particles),
        FilterConfig("apf", n_particles=n_particles),
        FilterConfig("enkf", enkf_ensemble=enkf),
        FilterConfig("ipf", n_particles=n_particles),
        FilterConfig("dhpf", n_particles=n_particles, levels=levels),
        FilterConfig("dhipf", n_particles=n_particles, levels=levels),
    ]


def doublewell_case(case: int, seed: int = 0, repeats: int = 1, noise_scaling: str = "sqrt_dt") -> ExperimentSpec:
    if case not in DOUBLEWELL_CASES:
        raise ConfigError(f"case: expected 1, 2 or 3, got {case!r}")
    params = dict(DOUBLEWELL_CASES[case], dt=0.01, noise_scaling=noise_scaling)
    return ExperimentSpec(
        name=f"case{case}",
        model="doublewell",
        model_params=params,
        x0=[0.6],
        n_steps=300,
        filters=_doublewell_filters(),
        seed=seed,
        switch_at=None if case == 1 else 150,
        repeats=repeats,
    )


def lorenz_track(seed: int = 0, repeats: int = 1) -> ExperimentSpec:
    return ExperimentSpec(
        name="lorenz-track",
        model="lorenz63",
        model_params=dict(sigma=1.0, R=1.0, dt=0.01),
        x0=[1.0, 1.0, 1.0],
        n_steps=4000,
        filters=[FilterConfig("ipf", n_particles=10), FilterConfig("dhipf", n_particles=10, levels=2)],
        seed=seed,
        repeats=repeats,
    )


def lorenz_switch(seed: int = 0, repeats: int = 1) -> ExperimentSpec:
    spec = lorenz_track(seed, repeats)
    spec.name = "lorenz-switch"
    spec.n_steps = 600
    spec.filters = [FilterConfig("ipf", n_particles=30), FilterConfig("dhipf", n_particles=30, levels=2)]
    return spec


GAP_SWEEP_GAPS = (1, 2, 5, 10, 20)


def gap_sweep(gaps: Sequence[int] = GAP_SWEEP_GAPS, seed: int = 0, repeats: int = 20,
              n_steps: int = 1000, n_particles: int = 50) -> list:
    specs = []
    for gap in gaps:
        specs.append(ExperimentSpec(
            name=f"gap-{gap}",
            model="lorenz63",
            model_params=dict(sigma=1.0, R=1.0, dt=0.01),
            x0=[1.0, 1.0, 1.0],
            n_steps=n_steps,
            gap=gap,
            filters=[
                FilterConfig("ipf", n_particles=n_particles),
                FilterConfig("dhipf", n_particles=n_particles, levels=2),
                FilterConfig("dhipf", n_particles=n_particles, levels=3),
            ],
            seed=seed,
            repeats=repeats,
        ))
    return specs


# -- running ------------------------------------------------------------------------


@dataclass
class RunResult:
    experiment: str
    filter: str
    repeat: int
    seed: int
    estimates: Optional[np.ndarray]
    squared_errors: Optional[np.ndarray]
    mse: float
    wall_clock_seconds: float
    error: Optional[str] = None
    stats: Optional[StepStats] = None
    truth: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return self.error is not None


def mse(estimates, truth) -> float:
    """Mean over steps of the squared Euclidean error."""
    e = np.asarray(getattr(estimates, "states", estimates), dtype=float)
    t = np.asarray(getattr(truth, "states", truth), dtype=float)
    if e.ndim == 1:
        e = e[:, None]
    if t.ndim == 1:
        t = t[:, None]
    if e.shape != t.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {t.shape}")
    return float(np.mean(np.sum((e - t) ** 2, axis=1)))


def derive_seed(*keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(k) for k in keys])


def run_filter(model: StateSpaceModel, config: FilterConfig, x0, observations: ObservationSeries,
               n_steps: int, rng: np.random.Generator, stats: Optional[StepStats] = None):
    """Run a filter from a point mass at ``x0``; returns ``(estimates, seconds)``.

    Steps without an observation are pure predictions.
    """
    obs = observations.as_dict()
    ens = point_ensemble(x0, config.ensemble_size)
    estimates = np.empty((n_steps + 1, model.state_dim))
    estimates[0] = estimate_mean(ens)
    start = time.perf_counter()
    for n in range(1, n_steps + 1):
        if n in obs:
            ens = assimilate(model, ens, obs[n], rng, config, stats)
        else:
            ens = predict_step(model, ens, rng)
        estimates[n] = ens.estimate if ens.estimate is not None else estimate_mean(ens)
    return estimates, time.perf_counter() - start


def run_experiment(spec: ExperimentSpec, keep_truth: bool = True) -> list:
    """Run every filter on every repeat; failures are recorded, not raised."""
    model = build_model(spec)
    results = []
    for r in range(spec.repeats):
        truth, obs = simulate_truth(model, spec.x0, spec.n_steps, spec.gap,
                                    seed=derive_seed(spec.seed, r, 0), switch_at=spec.switch_at)
        for config in spec.filters:
            base = spec.seed if config.seed is None else config.seed
            # every filter in a repeat gets the same stream unless it pins its own seed
            rng = np.random.default_rng(derive_seed(base, r, 1))
            stats = StepStats()
            try:
                est, secs = run_filter(model, config, spec.x0, obs, spec.n_steps, rng, stats)
            except (FilterError, OptimizationError, DegenerateWeightsError, FloatingPointError) as exc:
                log.warning("%s/%s repeat %d failed: %s", spec.name, config.name, r, exc)
                results.append(RunResult(spec.name, config.name, r, base, None, None, math.nan,
                                         math.nan, error=str(exc), stats=stats))
                continue
            sq = np.sum((est[1:] - truth.states[1:]) ** 2, axis=1)
            results.append(RunResult(
                spec.name, config.name, r, base, est, sq, mse(est[1:], truth.states[1:]), secs,
                stats=stats, truth=truth.states if keep_truth else None,
            ))
            log.info("%s/%s repeat %d: mse=%.4g (%.2fs)", spec.name, config.name, r, results[-1].mse, secs)
    return results


# -- reporting ----------------------------------------------------------------------


@dataclass
class ReportRow:
    experiment: str
    filter: str
    repeats: int
    mse_mean: float
    mse_median: float
    mse_min: float
    mse_max: float
    wall_clock_mean: float
    status: str


@dataclass
class Report:
    rows: list

    @property
    def failed(self) -> bool:
        return any(r.status != "ok" for r in self.rows)

    def row(self, experiment: str, filter_name: str) -> ReportRow:
        for r in self.rows:
            if r.experiment == experiment and r.filter == filter_name:
                return r
        raise KeyError((experiment, filter_name))

    def format_table(self) -> str:
        head = ["experiment", "filter", "n", "MSE mean", "MSE median", "MSE min", "MSE max", "time [s]", "status"]
        lines = [head]
        for r in self.rows:
            lines.append([r.experiment, r.filter, str(r.repeats), f"{r.mse_mean:.3e}", f"{r.mse_median:.3e}",
                          f"{r.mse_min:.3e}", f"{r.mse_max:.3e}", f"{r.wall_clock_mean:.3f}", r.status])
        widths = [max(len(line[i]) for line in lines) for i in range(len(head))]
        out = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines]
        out.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(out)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f.name for f in dataclasses.fields(ReportRow)])
            for r in self.rows:
                w.writerow(dataclasses.astuple(r))


def report(results: Sequence[RunResult]) -> Report:
    """Aggregate per-repeat results into one row per (experiment, filter)."""
    if not results:
        raise ValueError("no results to report")
    groups: dict = {}
    for res in results:
        groups.setdefault((res.experiment, res.filter), []).append(res)
    rows = []
    for (exp, name), group in groups.items():
        ok = [g for g in group if not g.failed]
        vals = np.array([g.mse for g in ok])
        times = np.array([g.wall_clock_seconds for g in ok])
        status = "ok" if len(ok) == len(group) else "failed"
        if ok:
            rows.append(ReportRow(exp, name, len(group), float(np.mean(vals)), float(np.median(vals)),
                                  float(vals.min()), float(vals.max()), float(np.mean(times)), status))
        else:
            nan = math.nan
            rows.append(ReportRow(exp, name, len(group), nan, nan, nan, nan, nan, status))
    return Report(rows)


def write_results(results: Sequence[RunResult], out_dir) -> Report:
    """Write ``results.csv``, ``trajectories.csv``, ``errors.csv`` and ``summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "filter", "repeat", "mse", "wall_clock_s"])
        for r in results:
            w.writerow([r.experiment, r.filter, r.repeat, repr(r.mse), repr(r.wall_clock_seconds)])

    runs: dict = {}
    for r in results:
        runs.setdefault((r.experiment, r.repeat), []).append(r)
    with open(out / "trajectories.csv", "w", newline="") as ft, open(out / "errors.csv", "w", newline="") as fe:
        wt, we = csv.writer(ft), csv.writer(fe)
        header_done = set()
        for (exp, rep), group in runs.items():
            truth = next((g.truth for g in group if g.truth is not None), None)
            if truth is None:
                continue
            d = truth.shape[1]
            names = [g.filter for g in group]
            key = (tuple(names), d)
            if key not in header_done:
                wt.writerow(["experiment", "repeat", "step"] + [f"truth_{j}" for j in range(d)]
                            + [f"{n}_{j}" for n in names for j in range(d)])
                we.writerow(["experiment", "repeat", "step"] + names)
                header_done.add(key)
            for step in range(truth.shape[0]):
                est = []
                err = []
                for g in group:
                    if g.failed:
                        est += [""] * d
                        err.append("")
                    else:
                        est += [repr(float(v)) for v in g.estimates[step]]
                        err.append(repr(float(g.squared_errors[step - 1])) if step > 0 else "0.0")
                wt.writerow([exp, rep, step] + [repr(float(v)) for v in truth[step]] + est)
                we.writerow([exp, rep, step] + err)

    rep = report(results)
    rep.write_csv(out / "summary.csv")
    return rep
