"""Shared drivers for tests that exercise whole filters."""

import numpy as np

from dhipf.experiments import doublewell_case, run_experiment, run_filter
from dhipf.filters import FilterConfig
from dhipf.models import ObservationSeries, linear_gaussian_model

from oracles import kalman_scalar, simulate_linear

A, Q, R, X0 = 0.9, 1.0, 1.0, 0.0


def kalman_tracking(config: FilterConfig, n_steps: int, seed: int = 0):
    """Run ``config`` on the scalar linear-Gaussian model.

    Returns the filter means, the exact Kalman means and variances, and the
    run's ``StepStats``.
    """
    from dhipf.filters import StepStats

    xs, ys = simulate_linear(A, Q, R, X0, n_steps, np.random.default_rng([seed, 0]))
    obs = ObservationSeries(np.arange(1, n_steps + 1), ys[:, None], 1)
    stats = StepStats()
    est, _ = run_filter(linear_gaussian_model(A, Q, R), config, [X0], obs, n_steps,
                        np.random.default_rng([seed, 1]), stats)
    mean, var = kalman_scalar(A, Q, R, ys, X0)
    return est[1:, 0], mean, var, stats


def case_medians(case: int, filters, seeds=range(10)):
    """Median MSE over seeds for each named filter of a built-in case."""
    mses = {}
    for seed in seeds:
        spec = doublewell_case(case, seed=seed)
        spec.filters = [f for f in spec.filters if f.name in filters]
        for r in run_experiment(spec, keep_truth=False):
            mses.setdefault(r.filter, []).append(r.mse)
    return {k: float(np.median(v)) for k, v in mses.items()}
