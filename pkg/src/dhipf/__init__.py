"""Drift homotopy implicit particle filter and baseline nonlinear filters."""

from .experiments import (
    ConfigError,
    ExperimentSpec,
    Report,
    RunResult,
    doublewell_case,
    gap_sweep,
    lorenz_switch,
    lorenz_track,
    mse,
    report,
    run_experiment,
    run_filter,
    write_results,
)
from .filters import (
    FILTER_KINDS,
    FilterConfig,
    FilterError,
    HomotopySchedule,
    StepStats,
    apf_step,
    assimilate,
    bootstrap_step,
    default_intermediate_drift,
    dhipf_step,
    dhpf_mcmc_step,
    enkf_step,
    homotopy_drift,
    ipf_step,
    predict_step,
)
from .implicit import ImplicitObjective, WeightedSample, build_objective, implicit_sample
from .models import (
    ObservationSeries,
    StateSpaceModel,
    Trajectory,
    doublewell_model,
    drift_doublewell,
    drift_lorenz63,
    linear_gaussian_model,
    lorenz63_model,
    observe,
    simulate_truth,
    step_state,
)
from .optimize import (
    IndefiniteHessianError,
    MinimizeResult,
    ObjectiveHandle,
    OptimizationError,
    cholesky,
    minimize,
    solve_random_map,
)
from .particles import (
    DegenerateWeightsError,
    Ensemble,
    effective_sample_size,
    estimate_mean,
    normalize_weights,
    resample_indices,
    resample_inverse_cdf,
)
from .probability import DiagonalGaussian, gaussian_logpdf, likelihood_logpdf, transition_logpdf

__version__ = "0.1.0"
