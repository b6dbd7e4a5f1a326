"""Rare-event probabilities between ensemble Kalman filter observation times.

Importance sampling with respect to the initial density, the driving Wiener
process, or both, with crude Monte Carlo and multilevel cross-entropy as
references.
"""
from .cross_entropy import CeOptions, LevelCapError, ce_estimate
from .enkf import Ensemble, ObservationModel, predict, run_filter_with_monitor, update
from .errors import ConfigError, NumericalError
from .harness import ExperimentConfig, bootstrap_std, emit_plot_data, packaged_config, run_table
from .kbe import ControlField, Grid1D, KbeSolution, gamma_const, solve_kbe, xi_asymptotic, xi_frozen
from .models import (
    GaussianDensity,
    Projection,
    RareEvent,
    SdeModel,
    charney_devore_model,
    constant_model,
    double_well_model,
    langevin_model,
    make_model,
)
from .paths import PathConfig, RngStream, simulate_path, simulate_paths
from .projection import MarkovianProjection, fit_surrogate, generate_regression_data
from .sampling import EstimatorReport, IsMode, RareEventEstimator, estimate, fit_tilted_initial

__version__ = "0.1.0"

__all__ = [
    "CeOptions",
    "ConfigError",
    "ControlField",
    "Ensemble",
    "EstimatorReport",
    "ExperimentConfig",
    "GaussianDensity",
    "Grid1D",
    "IsMode",
    "KbeSolution",
    "LevelCapError",
    "MarkovianProjection",
    "NumericalError",
    "ObservationModel",
    "PathConfig",
    "Projection",
    "RareEvent",
    "RareEventEstimator",
    "RngStream",
    "SdeModel",
    "bootstrap_std",
    "ce_estimate",
    "charney_devore_model",
    "constant_model",
    "double_well_model",
    "emit_plot_data",
    "estimate",
    "fit_surrogate",
    "fit_tilted_initial",
    "gamma_const",
    "generate_regression_data",
    "langevin_model",
    "make_model",
    "packaged_config",
    "predict",
    "run_filter_with_monitor",
    "run_table",
    "simulate_path",
    "simulate_paths",
    "solve_kbe",
    "update",
    "xi_asymptotic",
    "xi_frozen",
]
